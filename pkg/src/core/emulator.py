"""
Surrogates for expensive simulators and plug-in noise covariance estimation
"""

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from scipy import linalg, optimize
from scipy.spatial import Delaunay, QhullError
from scipy.spatial.distance import cdist

from .errors import (
    ConfigurationError,
    DimensionError,
    EstimationError,
    ExtrapolationWarning,
    FitError,
)
from .models import ComputerModel, FieldObservations, NoiseModel
from .numerics import Box, SeedLike, as_generator

NUGGET = 1e-8
MIN_TRAINING_ROWS = 10
KERNEL_NAME = "squared_exponential"

# Bounds on log hyperparameters, inputs scaled to the unit cube
LOG_LENGTHSCALE_BOUNDS = (np.log(1e-2), np.log(1e1))
LOG_VARIANCE_BOUNDS = (np.log(1e-4), np.log(1e4))


@dataclass(frozen=True, eq=False)
class RunTable:
    """
    Simulator runs: one row per (t, x) pair with outputs f(x, t).

    inputs holds the p calibration inputs followed by the d location inputs.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    p: int

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        outputs = np.asarray(self.outputs, dtype=float)
        if outputs.ndim == 1:
            outputs = outputs[:, None]
        if inputs.shape[0] != outputs.shape[0]:
            raise DimensionError(
                f"Run table has {inputs.shape[0]} input rows and {outputs.shape[0]} output rows"
            )
        if not 1 <= self.p < inputs.shape[1]:
            raise ConfigurationError(f"p={self.p} incompatible with {inputs.shape[1]} input columns")
        if inputs.shape[0] < inputs.shape[1] + 1:
            raise ConfigurationError(
                f"Run table needs at least {inputs.shape[1] + 1} rows, got {inputs.shape[0]}"
            )
        if np.unique(inputs, axis=0).shape[0] != inputs.shape[0]:
            raise ConfigurationError("Run table contains duplicate (t, x) rows")
        if not np.all(np.isfinite(inputs)) or not np.all(np.isfinite(outputs)):
            raise ConfigurationError("Run table contains non-finite values")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

    @property
    def n_rows(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1] - self.p

    @property
    def q(self) -> int:
        return self.outputs.shape[1]

    @property
    def theta(self) -> np.ndarray:
        return self.inputs[:, : self.p]

    @property
    def x(self) -> np.ndarray:
        return self.inputs[:, self.p:]

    def subset(self, rows: np.ndarray) -> "RunTable":
        return RunTable(self.inputs[rows], self.outputs[rows], self.p)

    def digest(self) -> str:
        sha = hashlib.sha256()
        sha.update(np.ascontiguousarray(self.inputs).tobytes())
        sha.update(np.ascontiguousarray(self.outputs).tobytes())
        return sha.hexdigest()

    @classmethod
    def from_model(cls, m: ComputerModel, thetas: np.ndarray, x: np.ndarray) -> "RunTable":
        """Evaluate m at every (theta, x) pair of a run grid"""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        x = np.asarray(x, dtype=float).reshape(-1, m.d)
        inputs, outputs = [], []
        for t in thetas:
            inputs.append(np.hstack([np.tile(t, (x.shape[0], 1)), x]))
            outputs.append(m.evaluate(x, t))
        return cls(np.vstack(inputs), np.vstack(outputs), m.p)

    def to_frame(self) -> pd.DataFrame:
        columns = ([f"t_{j + 1}" for j in range(self.p)]
                   + [f"x_{i + 1}" for i in range(self.d)]
                   + [f"f_{k + 1}" for k in range(self.q)])
        return pd.DataFrame(np.hstack([self.inputs, self.outputs]), columns=columns)

    def to_csv(self, path: Union[str, Path]):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "RunTable":
        frame = pd.read_csv(path, float_precision="round_trip")
        t_cols = [c for c in frame.columns if c.startswith("t_")]
        x_cols = [c for c in frame.columns if c.startswith("x_")]
        f_cols = [c for c in frame.columns if c.startswith("f_")]
        if not t_cols or not x_cols or not f_cols:
            raise ConfigurationError(f"{path}: run table needs t_*, x_* and f_* columns")
        inputs = frame[t_cols + x_cols].to_numpy(dtype=float)
        return cls(inputs, frame[f_cols].to_numpy(dtype=float), len(t_cols))


@dataclass
class GridLayout:
    """Index map of a run table laid out as (distinct runs) x (shared locations)"""

    thetas: np.ndarray
    xs: np.ndarray
    theta_index: np.ndarray
    x_index: np.ndarray

    def to_matrix(self, values: np.ndarray) -> np.ndarray:
        matrix = np.empty((self.thetas.shape[0], self.xs.shape[0]))
        matrix[self.theta_index, self.x_index] = values
        return matrix


def detect_grid(inputs: np.ndarray, p: int) -> Optional[GridLayout]:
    thetas, theta_index = np.unique(inputs[:, :p], axis=0, return_inverse=True)
    xs, x_index = np.unique(inputs[:, p:], axis=0, return_inverse=True)
    theta_index = np.asarray(theta_index).ravel()
    x_index = np.asarray(x_index).ravel()
    if thetas.shape[0] * xs.shape[0] != inputs.shape[0]:
        return None
    if thetas.shape[0] < 2 or xs.shape[0] < 2:
        return None
    return GridLayout(thetas, xs, theta_index, x_index)


def _se(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * cdist(a / lengthscales, b / lengthscales, "sqeuclidean"))


@dataclass
class KernelInterpolator:
    """Squared-exponential interpolator for one standardized outcome"""

    variance: float
    lengthscales: np.ndarray
    y_mean: float
    y_std: float
    nugget: float = NUGGET
    alpha: Optional[np.ndarray] = field(default=None, repr=False)

    def log_params(self) -> np.ndarray:
        return np.concatenate([[np.log(self.variance)], np.log(self.lengthscales)])

    def to_dict(self) -> Dict:
        return {
            "variance": float(self.variance),
            "lengthscales": self.lengthscales.tolist(),
            "y_mean": float(self.y_mean),
            "y_std": float(self.y_std),
            "nugget": self.nugget,
        }


def _grid_solve(y: np.ndarray, layout: GridLayout, variance: float, lengthscales: np.ndarray,
                p: int, nugget: float):
    """Kronecker eigen-solve of (variance * K_t (x) K_x + nugget I) alpha = y"""
    lam_t, u_t = linalg.eigh(_se(layout.thetas, layout.thetas, lengthscales[:p]))
    lam_x, u_x = linalg.eigh(_se(layout.xs, layout.xs, lengthscales[p:]))
    eig = variance * np.outer(np.clip(lam_t, 0.0, None), np.clip(lam_x, 0.0, None)) + nugget
    y_rot = u_t.T @ layout.to_matrix(y) @ u_x
    alpha_rot = y_rot / eig
    quad = float(np.sum(y_rot * alpha_rot))
    logdet = float(np.sum(np.log(eig)))
    return u_t @ alpha_rot @ u_x.T, quad, logdet


def _dense_solve(y: np.ndarray, z: np.ndarray, variance: float, lengthscales: np.ndarray,
                 nugget: float):
    lam, u = linalg.eigh(variance * _se(z, z, lengthscales))
    eig = np.clip(lam, 0.0, None) + nugget
    y_rot = u.T @ y
    alpha_rot = y_rot / eig
    return u @ alpha_rot, float(y_rot @ alpha_rot), float(np.sum(np.log(eig)))


class Surrogate:
    """
    Deterministic emulator f_hat built from a RunTable.

    One independent squared-exponential interpolator per outcome, trained on
    inputs scaled to the unit cube and standardized outputs. When the table is
    a full (runs x shared locations) grid the covariance factorizes as a
    Kronecker product and is solved through the eigen-decompositions of the
    two factors.
    """

    def __init__(self, runs: RunTable, interpolators: List[KernelInterpolator],
                 holdout_rmse: Optional[np.ndarray] = None,
                 holdout_relative_rmse: Optional[np.ndarray] = None):
        self.runs = runs
        self.p = runs.p
        self.d = runs.d
        self.q = runs.q
        self.lower = runs.inputs.min(axis=0)
        span = runs.inputs.max(axis=0) - self.lower
        if np.all(span == 0):
            raise FitError("All run-table inputs are constant")
        self.span = np.where(span > 0, span, 1.0)
        self.interpolators = interpolators
        self.holdout_rmse = holdout_rmse
        self.holdout_relative_rmse = holdout_relative_rmse
        self._z = self.normalize(runs.inputs)
        self._layout = detect_grid(self._z, self.p)
        self._theta_points = np.unique(runs.theta, axis=0)
        self._hull = None
        if self.p > 1:
            try:
                self._hull = Delaunay(self._theta_points)
            except (QhullError, ValueError):
                self._hull = None
        self.extrapolated = False
        for k, interp in enumerate(self.interpolators):
            self._factorize(k, interp)

    @property
    def is_grid(self) -> bool:
        return self._layout is not None

    def normalize(self, inputs: np.ndarray) -> np.ndarray:
        return (np.asarray(inputs, dtype=float) - self.lower) / self.span

    def _standardized(self, k: int) -> np.ndarray:
        interp = self.interpolators[k]
        return (self.runs.outputs[:, k] - interp.y_mean) / interp.y_std

    def _factorize(self, k: int, interp: KernelInterpolator):
        y = self._standardized(k)
        if self._layout is not None:
            interp.alpha, _, _ = _grid_solve(y, self._layout, interp.variance,
                                             interp.lengthscales, self.p, interp.nugget)
        else:
            interp.alpha, _, _ = _dense_solve(y, self._z, interp.variance,
                                              interp.lengthscales, interp.nugget)

    def _check_extrapolation(self, theta: np.ndarray):
        if self.extrapolated:
            return
        theta = np.atleast_2d(theta)
        if self._hull is not None:
            outside = np.any(self._hull.find_simplex(theta, tol=1e-10) < 0)
        else:
            lo = self._theta_points.min(axis=0) - 1e-10
            hi = self._theta_points.max(axis=0) + 1e-10
            outside = bool(np.any((theta < lo) | (theta > hi)))
        if outside:
            self.extrapolated = True
            warnings.warn(
                f"Surrogate evaluated outside the hull of its training runs at t={theta[0]}",
                ExtrapolationWarning,
                stacklevel=3,
            )

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Predictive mean at rows of (t, x), returned as (M, q)"""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if inputs.shape[1] != self.p + self.d:
            raise DimensionError(f"Expected {self.p + self.d} input columns, got {inputs.shape[1]}")
        self._check_extrapolation(np.unique(inputs[:, : self.p], axis=0))
        z = self.normalize(inputs)
        out = np.empty((inputs.shape[0], self.q))
        for k, interp in enumerate(self.interpolators):
            ls = interp.lengthscales
            if self._layout is not None:
                k_t = _se(z[:, : self.p], self._layout.thetas, ls[: self.p])
                k_x = _se(z[:, self.p:], self._layout.xs, ls[self.p:])
                mean = interp.variance * np.sum((k_t @ interp.alpha) * k_x, axis=1)
            else:
                mean = interp.variance * (_se(z, self._z, ls) @ interp.alpha)
            out[:, k] = interp.y_mean + interp.y_std * mean
        return out

    def predict_at(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return self.predict(np.hstack([np.tile(t, (x.shape[0], 1)), x]))

    @property
    def training_summary(self) -> Dict:
        return {
            "rows": self.runs.n_rows,
            "grid": self.is_grid,
            "holdout_rmse": None if self.holdout_rmse is None else self.holdout_rmse.tolist(),
            "holdout_relative_rmse": (None if self.holdout_relative_rmse is None
                                      else self.holdout_relative_rmse.tolist()),
        }

    def to_dict(self) -> Dict:
        return {
            "kernel": KERNEL_NAME,
            "p": self.p,
            "d": self.d,
            "outcomes": [interp.to_dict() for interp in self.interpolators],
            "training_digest": self.runs.digest(),
            "training_summary": self.training_summary,
        }

    def save(self, path: Union[str, Path]):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: Union[str, Path], runs: RunTable) -> "Surrogate":
        """Rebuild a saved surrogate; runs must be the table it was trained on"""
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("kernel") != KERNEL_NAME:
            raise ConfigurationError(f"Unsupported surrogate kernel {doc.get('kernel')!r}")
        if doc.get("training_digest") != runs.digest():
            raise ConfigurationError("Run table does not match the saved surrogate's training data")
        interpolators = [
            KernelInterpolator(
                variance=o["variance"],
                lengthscales=np.asarray(o["lengthscales"], dtype=float),
                y_mean=o["y_mean"],
                y_std=o["y_std"],
                nugget=o.get("nugget", NUGGET),
            )
            for o in doc["outcomes"]
        ]
        summary = doc.get("training_summary", {})
        rmse = summary.get("holdout_rmse")
        rel = summary.get("holdout_relative_rmse")
        return cls(runs, interpolators,
                   None if rmse is None else np.asarray(rmse),
                   None if rel is None else np.asarray(rel))


def _optimize_hyperparameters(y: np.ndarray, z: np.ndarray, layout: Optional[GridLayout], p: int,
                              n_restarts: int, rng: np.random.Generator) -> KernelInterpolator:
    y_mean = float(np.mean(y))
    y_std = float(np.std(y))
    if y_std == 0:
        y_std = 1.0
    ys = (y - y_mean) / y_std
    dim = z.shape[1]
    n = ys.size

    def neg_log_marginal(log_params):
        variance = np.exp(log_params[0])
        ls = np.exp(log_params[1:])
        if layout is not None:
            _, quad, logdet = _grid_solve(ys, layout, variance, ls, p, NUGGET)
        else:
            _, quad, logdet = _dense_solve(ys, z, variance, ls, NUGGET)
        value = 0.5 * quad + 0.5 * logdet + 0.5 * n * np.log(2 * np.pi)
        return value if np.isfinite(value) else 1e300

    bounds = [LOG_VARIANCE_BOUNDS] + [LOG_LENGTHSCALE_BOUNDS] * dim
    starts = [np.concatenate([[0.0], np.full(dim, np.log(0.3))])]
    for _ in range(max(n_restarts - 1, 0)):
        starts.append(np.array([rng.uniform(lo, hi) for lo, hi in bounds]))

    best = None
    for start in starts:
        result = optimize.minimize(neg_log_marginal, start, method="L-BFGS-B", bounds=bounds)
        if best is None or result.fun < best.fun:
            best = result
    return KernelInterpolator(
        variance=float(np.exp(best.x[0])),
        lengthscales=np.exp(best.x[1:]),
        y_mean=y_mean,
        y_std=y_std,
    )


def _train(runs: RunTable, n_restarts: int, rng: np.random.Generator) -> List[KernelInterpolator]:
    if runs.n_rows < MIN_TRAINING_ROWS:
        raise FitError(f"Surrogate needs at least {MIN_TRAINING_ROWS} training rows, got {runs.n_rows}")
    lower = runs.inputs.min(axis=0)
    span = runs.inputs.max(axis=0) - lower
    if np.all(span == 0):
        raise FitError("All run-table inputs are constant")
    z = (runs.inputs - lower) / np.where(span > 0, span, 1.0)
    layout = detect_grid(z, runs.p)
    return [
        _optimize_hyperparameters(runs.outputs[:, k], z, layout, runs.p, n_restarts, rng)
        for k in range(runs.q)
    ]


def fit_surrogate(runs: RunTable, holdout_fraction: float = 0.1, n_restarts: int = 5,
                  seed: SeedLike = 0, verbose: bool = False) -> Surrogate:
    """
    Fit one kernel interpolator per outcome by maximizing the log marginal
    likelihood from n_restarts starts.

    A held-out share of the table (whole runs when the table is a grid,
    single rows otherwise) measures prediction RMSE per outcome; the returned
    surrogate is then refitted on every row with the selected hyperparameters.
    """
    if not 0.0 <= holdout_fraction <= 0.5:
        raise ConfigurationError(f"holdout_fraction must lie in [0, 0.5], got {holdout_fraction}")
    rng = as_generator(seed)

    rmse = rel_rmse = None
    interpolators = None
    if holdout_fraction > 0:
        layout = detect_grid(runs.inputs, runs.p)
        if layout is not None:
            n_runs = layout.thetas.shape[0]
            held_runs = rng.choice(n_runs, size=max(1, int(round(holdout_fraction * n_runs))),
                                   replace=False)
            held = np.isin(layout.theta_index, held_runs)
        else:
            held = np.zeros(runs.n_rows, dtype=bool)
            count = max(1, int(round(holdout_fraction * runs.n_rows)))
            held[rng.choice(runs.n_rows, size=count, replace=False)] = True
        train = runs.subset(~held)
        interpolators = _train(train, n_restarts, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            predicted = Surrogate(train, interpolators).predict(runs.inputs[held])
        errors = predicted - runs.outputs[held]
        rmse = np.sqrt(np.mean(errors ** 2, axis=0))
        scale = np.std(runs.outputs, axis=0)
        rel_rmse = rmse / np.where(scale > 0, scale, 1.0)
        interpolators = [
            KernelInterpolator(i.variance, i.lengthscales.copy(), i.y_mean, i.y_std, i.nugget)
            for i in interpolators
        ]
        # Standardization follows the full table once refitted
        for k, interp in enumerate(interpolators):
            std = float(np.std(runs.outputs[:, k]))
            interp.y_mean = float(np.mean(runs.outputs[:, k]))
            interp.y_std = std if std > 0 else 1.0
    else:
        interpolators = _train(runs, n_restarts, rng)

    surrogate = Surrogate(runs, interpolators, rmse, rel_rmse)
    if verbose:
        print(f"🧮 Surrogate fitted on {runs.n_rows} rows ({'grid' if surrogate.is_grid else 'dense'})")
        if rel_rmse is not None:
            print(f"   Held-out relative RMSE per outcome: {np.round(rel_rmse, 4)}")
    return surrogate


def surrogate_as_model(s: Surrogate, theta_domain: Optional[Box] = None,
                       x_domain: Optional[Box] = None, name: str = "surrogate") -> ComputerModel:
    """Wrap the predictive mean as a ComputerModel with finite-difference gradients"""
    if theta_domain is None:
        theta_domain = Box(s.runs.theta.min(axis=0), s.runs.theta.max(axis=0))
    if x_domain is None:
        x_domain = Box(s.runs.x.min(axis=0), s.runs.x.max(axis=0))
    if theta_domain.dim != s.p:
        raise DimensionError(f"Theta domain has dimension {theta_domain.dim}, surrogate p={s.p}")
    return ComputerModel(s.predict_at, theta_domain, q=s.q, x_domain=x_domain, name=name)


@dataclass
class NadarayaWatsonSmoother:
    """Gaussian-kernel smoother with leave-one-out bandwidth selection"""

    n_bandwidths: int = 20
    min_bandwidth: float = 1e-3
    max_bandwidth: float = 0.5

    def bandwidth_grid(self, domain: Box) -> np.ndarray:
        width = float(np.mean(domain.widths))
        return np.geomspace(self.min_bandwidth, self.max_bandwidth, self.n_bandwidths) * width

    @staticmethod
    def weights(points: np.ndarray, bandwidth: float, leave_one_out: bool) -> np.ndarray:
        logits = -0.5 * cdist(points, points, "sqeuclidean") / bandwidth ** 2
        if leave_one_out:
            np.fill_diagonal(logits, -np.inf)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=1, keepdims=True)

    def select_bandwidth(self, points: np.ndarray, y: np.ndarray, domain: Box) -> float:
        best_h, best_err = None, np.inf
        for h in self.bandwidth_grid(domain):
            err = float(np.mean((y - self.weights(points, h, True) @ y) ** 2))
            if err < best_err:
                best_h, best_err = h, err
        return best_h

    def fit(self, points: np.ndarray, y: np.ndarray, domain: Box) -> np.ndarray:
        h = self.select_bandwidth(points, y, domain)
        return self.weights(points, h, False) @ y


def estimate_noise_covariance(field: FieldObservations,
                              smoother: Optional[NadarayaWatsonSmoother] = None,
                              verbose: bool = False) -> NoiseModel:
    """
    Plug-in Sigma_F: smooth every outcome independently, then take the
    sample covariance of the residual matrix.
    """
    if field.n < 10:
        raise EstimationError(f"Noise estimation needs at least 10 observations, got {field.n}")
    smoother = smoother or NadarayaWatsonSmoother()
    points = field.design.points
    residuals = np.column_stack([
        field.values[:, k] - smoother.fit(points, field.values[:, k], field.design.domain)
        for k in range(field.q)
    ])
    sigma = np.atleast_2d(np.cov(residuals, rowvar=False))
    sigma = 0.5 * (sigma + sigma.T) + 1e-12 * np.eye(field.q)
    if verbose:
        print(f"📏 Estimated noise SD per outcome: {np.round(np.sqrt(np.diag(sigma)), 4)}")
    return NoiseModel(sigma)
