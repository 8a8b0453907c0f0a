"""
Designs, field data, computer models and the orthogonality constraint set
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import (
    ConfigurationError,
    ContractViolationError,
    DimensionError,
    ModelEvaluationError,
    NumericalError,
    OrthocalError,
    RankDeficiencyWarning,
)
from .numerics import (
    RANK_RTOL,
    Box,
    GridFunction,
    QuadratureRule,
    SeedLike,
    as_generator,
    inner_product,
    spd_power,
)

FD_RELATIVE_STEP = 1e-5

ModelFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]
GradientFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _as_points(x: np.ndarray, dim: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None] if (dim is None or dim == 1) else x[None, :]
    if dim is not None and x.shape[1] != dim:
        raise DimensionError(f"Expected points with {dim} columns, got {x.shape[1]}")
    return x


@dataclass(frozen=True, eq=False)
class Design:
    """Input locations x_1..x_n inside the domain X"""

    points: np.ndarray
    domain: Box

    def __post_init__(self):
        points = _as_points(self.points, self.domain.dim)
        if points.shape[0] < 1:
            raise ConfigurationError("A design needs at least one point")
        if not self.domain.contains(points, tol=1e-12):
            raise ConfigurationError("Design points must lie inside the domain")
        object.__setattr__(self, "points", points)

    @classmethod
    def uniform(cls, n: int, domain: Optional[Box] = None, seed: SeedLike = None) -> "Design":
        """n points drawn uniformly over the domain"""
        domain = domain or Box.unit(1)
        rng = as_generator(seed)
        return cls(domain.scale_unit(rng.uniform(size=(int(n), domain.dim))), domain)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True, eq=False)
class FieldObservations:
    """q-variate field measurements y_F(x_i) on a design"""

    design: Design
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.design.n:
            raise DimensionError(
                f"Field data has {values.shape[0]} rows for a design of {self.design.n} points"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("Field observations must be finite")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.design.n

    @property
    def q(self) -> int:
        return self.values.shape[1]

    def whitened(self, whitening: np.ndarray) -> "FieldObservations":
        return FieldObservations(self.design, self.values @ np.asarray(whitening).T)

    def select_outcomes(self, outcomes: Sequence[int]) -> "FieldObservations":
        return FieldObservations(self.design, self.values[:, list(outcomes)])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.design.points,
                             columns=[f"x_{i + 1}" for i in range(self.design.d)])
        for k in range(self.q):
            frame[f"y_{k + 1}"] = self.values[:, k]
        return frame

    @classmethod
    def from_csv(cls, path: Union[str, Path], domain: Optional[Box] = None) -> "FieldObservations":
        """Read a CSV with columns x_1..x_d, y_1..y_q"""
        frame = pd.read_csv(path, float_precision="round_trip")
        x_cols = [c for c in frame.columns if c.startswith("x_")]
        y_cols = [c for c in frame.columns if c.startswith("y_")]
        if not x_cols or not y_cols:
            raise ConfigurationError(f"{path}: field data needs x_* and y_* columns")
        points = frame[x_cols].to_numpy(dtype=float)
        if domain is None:
            domain = Box(points.min(axis=0), points.max(axis=0))
        return cls(Design(points, domain), frame[y_cols].to_numpy(dtype=float))


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Observation noise covariance Sigma_F (held fixed during calibration)"""

    sigma_F: np.ndarray

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma_F, dtype=float))
        if sigma.shape[0] != sigma.shape[1]:
            raise DimensionError(f"Sigma_F must be square, got {sigma.shape}")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise ContractViolationError("Sigma_F must be symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        if np.linalg.eigvalsh(sigma).min() < -1e-12 * max(1.0, np.abs(sigma).max()):
            raise ContractViolationError("Sigma_F must be positive semi-definite")
        object.__setattr__(self, "sigma_F", sigma)

    @classmethod
    def isotropic(cls, sigma: float, q: int = 1) -> "NoiseModel":
        return cls(float(sigma) ** 2 * np.eye(q))

    @classmethod
    def identity(cls, q: int) -> "NoiseModel":
        return cls(np.eye(q))

    @property
    def q(self) -> int:
        return self.sigma_F.shape[0]

    @property
    def variances(self) -> np.ndarray:
        return np.diag(self.sigma_F).copy()

    @property
    def is_positive_definite(self) -> bool:
        return bool(np.linalg.eigvalsh(self.sigma_F).min() > 0)

    def square_root(self) -> np.ndarray:
        """Symmetric PSD square root (zero matrix allowed)"""
        eigvals, eigvecs = np.linalg.eigh(self.sigma_F)
        return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T

    def whitening_matrix(self) -> np.ndarray:
        """Sigma_F^{-1/2}"""
        if not self.is_positive_definite:
            raise NumericalError("Whitening needs a positive definite Sigma_F")
        return spd_power(self.sigma_F, -0.5)

    def precision(self) -> np.ndarray:
        if not self.is_positive_definite:
            raise NumericalError("Likelihood needs a positive definite Sigma_F")
        return np.linalg.inv(self.sigma_F)

    def to_dict(self):
        return {"sigma_F": self.sigma_F.tolist()}


class ComputerModel:
    """
    Simulator f: X x Theta -> R^q, vectorised over x.

    The model function receives x as an (N, d) array and t as a p-vector and
    returns an (N, q) array. Gradients with respect to t are either supplied
    analytically as an (p, N, q) array-valued function, or obtained by central
    differences with step FD_RELATIVE_STEP times the width of each Theta axis
    (one-sided within a step of the boundary).
    """

    def __init__(
        self,
        func: ModelFunction,
        theta_domain: Box,
        q: int = 1,
        gradient: Optional[GradientFunction] = None,
        x_domain: Optional[Box] = None,
        fd_step: Optional[Sequence[float]] = None,
        name: str = "model",
    ):
        self._func = func
        self._gradient = gradient
        self.theta_domain = theta_domain
        self.x_domain = x_domain or Box.unit(1)
        self.q = int(q)
        self.name = name
        if fd_step is None:
            self.fd_step = FD_RELATIVE_STEP * theta_domain.widths
        else:
            self.fd_step = np.broadcast_to(np.asarray(fd_step, dtype=float), (self.p,)).copy()

    @property
    def p(self) -> int:
        return self.theta_domain.dim

    @property
    def d(self) -> int:
        return self.x_domain.dim

    @property
    def gradient_mode(self) -> str:
        return "analytic" if self._gradient is not None else "finite_difference"

    def evaluate(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """f(x, t) for every row of x, as an (N, q) array"""
        x = _as_points(x, self.d)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        try:
            values = np.asarray(self._func(x, t), dtype=float)
        except OrthocalError:
            raise
        except Exception as e:
            raise ModelEvaluationError(f"{self.name} failed at t={t}: {e}") from e
        values = values.reshape(x.shape[0], self.q)
        if not np.all(np.isfinite(values)):
            raise ModelEvaluationError(f"{self.name} returned non-finite output at t={t}")
        return values

    __call__ = evaluate

    def _difference(self, x: np.ndarray, t: np.ndarray, j: int, step: float) -> np.ndarray:
        lo, hi = self.theta_domain.lower[j], self.theta_domain.upper[j]
        forward = t.copy()
        backward = t.copy()
        if t[j] - step >= lo and t[j] + step <= hi:
            forward[j] += step
            backward[j] -= step
            return (self.evaluate(x, forward) - self.evaluate(x, backward)) / (2.0 * step)
        if t[j] + step <= hi:
            forward[j] += step
            return (self.evaluate(x, forward) - self.evaluate(x, t)) / step
        backward[j] -= step
        return (self.evaluate(x, t) - self.evaluate(x, backward)) / step

    def partial_derivative(self, x: np.ndarray, t: np.ndarray, j: int,
                           step: Optional[float] = None) -> np.ndarray:
        """g_j(x, t) = d f(x, t) / d t_j as an (N, q) array (j is zero-based)"""
        if not 0 <= j < self.p:
            raise ConfigurationError(f"Parameter index {j} outside 0..{self.p - 1}")
        x = _as_points(x, self.d)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self._gradient is not None and step is None:
            grads = np.asarray(self._gradient(x, t), dtype=float)
            return grads.reshape(self.p, x.shape[0], self.q)[j]
        return self._difference(x, t, j, self.fd_step[j] if step is None else step)

    def partial_derivatives(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        """All gradients stacked as a (p, N, q) array"""
        x = _as_points(x, self.d)
        if self._gradient is not None:
            t = np.atleast_1d(np.asarray(t, dtype=float))
            return np.asarray(self._gradient(x, t), dtype=float).reshape(self.p, x.shape[0], self.q)
        return np.stack([self.partial_derivative(x, t, j) for j in range(self.p)])

    def finite_difference_derivatives(self, x: np.ndarray, t: np.ndarray,
                                      step: Optional[Sequence[float]] = None) -> np.ndarray:
        x = _as_points(x, self.d)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        steps = self.fd_step if step is None else np.broadcast_to(step, (self.p,))
        return np.stack([self._difference(x, t, j, steps[j]) for j in range(self.p)])

    def gradient_gap(self, x: np.ndarray, t: np.ndarray) -> float:
        """Largest relative gap between analytic and finite-difference gradients"""
        analytic = self.partial_derivatives(x, t)
        numeric = self.finite_difference_derivatives(x, t)
        scale = max(float(np.max(np.abs(analytic))), 1e-12)
        return float(np.max(np.abs(analytic - numeric)) / scale)

    def check_gradients(self, n_points: int = 5, rtol: float = 1e-4, seed: SeedLike = 0,
                        x: Optional[np.ndarray] = None) -> float:
        """
        Compare analytic gradients with central differences at random interior
        points of Theta. Raises ContractViolationError above rtol.
        """
        if self._gradient is None:
            return 0.0
        rng = as_generator(seed)
        if x is None:
            x = self.x_domain.scale_unit(rng.uniform(size=(20, self.d)))
        worst = 0.0
        for _ in range(n_points):
            t = self.theta_domain.scale_unit(rng.uniform(0.1, 0.9, size=self.p))
            worst = max(worst, self.gradient_gap(x, t))
        if worst > rtol:
            raise ContractViolationError(
                f"{self.name}: analytic gradients differ from finite differences by {worst:.3g}"
            )
        return worst

    def whitened(self, whitening: np.ndarray) -> "ComputerModel":
        """Model with outputs (and gradients) multiplied by the whitening matrix"""
        whitening = np.asarray(whitening, dtype=float)
        func = self._func
        gradient = None
        if self._gradient is not None:
            parent_gradient = self._gradient
            p, q = self.p, self.q

            def gradient(x, t):
                grads = np.asarray(parent_gradient(x, t), dtype=float).reshape(p, x.shape[0], q)
                return grads @ whitening.T

        q = self.q
        return ComputerModel(
            lambda x, t: np.asarray(func(x, t), dtype=float).reshape(x.shape[0], q) @ whitening.T,
            self.theta_domain, q=whitening.shape[0], gradient=gradient,
            x_domain=self.x_domain, fd_step=self.fd_step, name=f"{self.name}[whitened]",
        )

    def select_outcomes(self, outcomes: Sequence[int]) -> "ComputerModel":
        outcomes = list(outcomes)
        func = self._func
        gradient = None
        p, q = self.p, self.q
        if self._gradient is not None:
            parent_gradient = self._gradient

            def gradient(x, t):
                grads = np.asarray(parent_gradient(x, t), dtype=float).reshape(p, x.shape[0], q)
                return grads[:, :, outcomes]

        return ComputerModel(
            lambda x, t: np.asarray(func(x, t), dtype=float).reshape(x.shape[0], q)[:, outcomes],
            self.theta_domain, q=len(outcomes), gradient=gradient, x_domain=self.x_domain,
            fd_step=self.fd_step, name=f"{self.name}{[k + 1 for k in outcomes]}",
        )


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """
    The gradients g_j(., anchor) defining F_anchor, their Gram matrix Q and,
    when a design is attached, the same gradients evaluated at the design.
    """

    anchor: np.ndarray
    gradients: List[GridFunction]
    gram: np.ndarray
    design_gradients: Optional[np.ndarray] = None
    design: Optional[Design] = field(default=None, repr=False)

    def __post_init__(self):
        gram = np.atleast_2d(np.asarray(self.gram, dtype=float))
        if not np.allclose(gram, gram.T, rtol=0.0, atol=1e-12):
            raise ContractViolationError("Gram matrix must be symmetric")
        if gram.shape != (self.p, self.p):
            raise DimensionError(f"Gram matrix is {gram.shape} for {self.p} gradients")
        object.__setattr__(self, "anchor", np.atleast_1d(np.asarray(self.anchor, dtype=float)))
        object.__setattr__(self, "gram", gram)

    @property
    def p(self) -> int:
        return len(self.gradients)

    @property
    def q(self) -> int:
        return self.gradients[0].q

    @property
    def rule(self) -> QuadratureRule:
        return self.gradients[0].rule

    def grid_values(self) -> np.ndarray:
        """Gradients on the quadrature nodes as a (p, N, q) array"""
        return np.stack([g.values for g in self.gradients])

    def functionals(self, bias: GridFunction) -> np.ndarray:
        """eta_j = sum_k <b_k, g_{j,k}> for every j"""
        return np.array([inner_product(bias, g) for g in self.gradients])

    def recomputed_gram(self) -> np.ndarray:
        return gram_matrix(self.gradients)


def gram_matrix(gradients: Sequence[GridFunction]) -> np.ndarray:
    p = len(gradients)
    gram = np.empty((p, p))
    for j in range(p):
        for jj in range(j, p):
            gram[j, jj] = gram[jj, j] = inner_product(gradients[j], gradients[jj])
    return gram


def model_gradient(m: ComputerModel, j: int, t: np.ndarray, rule: QuadratureRule) -> GridFunction:
    """g_j(., t) on the nodes of rule (j is zero-based)"""
    return GridFunction(m.partial_derivative(rule.nodes, t, j), rule)


def build_constraint_set(m: ComputerModel, anchor: np.ndarray, rule: QuadratureRule,
                         design: Optional[Design] = None, verbose: bool = False) -> ConstraintSet:
    """
    Assemble F_anchor: the p gradient functions at the anchor and their Gram
    matrix. Emits a RankDeficiencyWarning when the Gram matrix is numerically
    singular.
    """
    anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
    if anchor.size != m.p:
        raise DimensionError(f"Anchor has {anchor.size} entries, model has p={m.p}")
    if not m.theta_domain.contains(anchor, tol=1e-12):
        raise ConfigurationError(f"Anchor {anchor} lies outside Theta")

    gradients = [model_gradient(m, j, anchor, rule) for j in range(m.p)]
    gram = gram_matrix(gradients)

    eigvals = np.linalg.eigvalsh(gram)
    if eigvals.max() <= 0 or eigvals.min() <= RANK_RTOL * eigvals.max():
        warnings.warn(
            f"Gram matrix of model gradients at {anchor} is numerically singular",
            RankDeficiencyWarning,
            stacklevel=2,
        )

    design_gradients = None
    if design is not None:
        design_gradients = m.partial_derivatives(design.points, anchor)

    if verbose:
        print(f"📐 Constraint set at anchor {np.round(anchor, 4)} (p={m.p}, q={m.q})")
        print(f"   Gram diagonal: {np.round(np.diag(gram), 6)}")

    return ConstraintSet(anchor=anchor, gradients=gradients, gram=gram,
                         design_gradients=design_gradients, design=design)


def sample_field_data(truth: Callable[[np.ndarray], np.ndarray], noise: NoiseModel,
                      design: Design, seed: SeedLike = None) -> FieldObservations:
    """y_i = truth(x_i) + eps_i with eps_i ~ N_q(0, Sigma_F), reproducible from seed"""
    rng = as_generator(seed)
    mean = np.asarray(truth(design.points), dtype=float).reshape(design.n, -1)
    if mean.shape[1] != noise.q:
        raise DimensionError(f"Truth has {mean.shape[1]} outcomes, noise model has q={noise.q}")
    eps = rng.standard_normal((design.n, noise.q)) @ noise.square_root()
    return FieldObservations(design, mean + eps)
