"""
Benchmark experiments: configuration, data generation, replication and result files
"""

import dataclasses
import functools
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from .calibrate import (
    PRIORS,
    PROJECTIONS,
    CalibrationSettings,
    Chain,
    CoverageTable,
    ReplicationOutcome,
    calibrate,
    coverage_experiment,
    population_minimizer,
)
from .diagnostics import kernel_density
from .emulator import RunTable, estimate_noise_covariance, fit_surrogate, surrogate_as_model
from .errors import ConfigurationError
from .models import ComputerModel, Design, FieldObservations, NoiseModel, sample_field_data
from .numerics import Box, SeedLike, as_generator, gauss_legendre_rule
from .projection import WEIGHTINGS
from .reference_models import (
    MODEL1_THETA_STAR,
    MODEL2_THETA_DOMAIN,
    MODEL2_THETA_STAR,
    MODEL3_GRID_SIZE,
    bivariate,
    bivariate_sigma,
    bivariate_truth,
    model1,
    model1_truth,
    model2,
    model2_truth,
    model3_theta_grid,
)

MODELS = ("model1", "model2", "model3", "bivariate", "custom-runtable")
BIVARIATE_MASS_INTERVAL = (3.4, 3.7)

# Fields that change where or how fast results are produced, not what they are
NON_SEMANTIC_FIELDS = ("output_dir", "workers", "diagnostics")


@dataclass
class ExperimentConfig:
    """One benchmark experiment; mirrors the KEY=VALUE config file"""

    model: str = "model1"
    prior: str = "gp"
    projection: str = "functional"
    n: int = 100
    sigma: float = 0.2
    sigma_offdiag: float = 0.012
    iters: int = 5000
    burnin: int = 1000
    thin: int = 1
    replications: int = 100
    seed: int = 7
    quadrature_points: int = 32
    output_dir: str = "results"
    gamma: float = 10.0
    psi: float = 0.5
    kernel_sigma2: Optional[float] = None
    basis_k: int = 12
    basis_tau2: float = 1.0
    moment_samples: Optional[int] = None
    constraint_points: str = "quadrature"
    outcomes: Optional[List[int]] = None
    holdout_fraction: float = 0.1
    runtable: Optional[str] = None
    field_data: Optional[str] = None
    theta_lower: Optional[List[float]] = None
    theta_upper: Optional[List[float]] = None
    workers: int = 1
    diagnostics: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in MODELS:
            raise ConfigurationError(f"Unknown model {self.model!r}; choose from {MODELS}")
        if self.prior not in PRIORS:
            raise ConfigurationError(f"Unknown prior {self.prior!r}; choose from {PRIORS}")
        if self.projection not in PROJECTIONS:
            raise ConfigurationError(f"Unknown projection {self.projection!r}; choose from {PROJECTIONS}")
        if self.constraint_points not in WEIGHTINGS:
            raise ConfigurationError(f"CONSTRAINT_POINTS must be one of {WEIGHTINGS}")
        for name in ("n", "iters", "replications", "quadrature_points", "basis_k", "workers", "thin"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name.upper()} must be positive, got {getattr(self, name)}")
        for name in ("sigma", "gamma", "psi", "basis_tau2"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name.upper()} must be positive, got {getattr(self, name)}")
        if self.kernel_sigma2 is not None and not self.kernel_sigma2 > 0:
            raise ConfigurationError("KERNEL_SIGMA2 must be positive")
        if not self.iters > self.burnin >= 0:
            raise ConfigurationError(f"Need ITERS > BURNIN >= 0, got {self.iters} and {self.burnin}")
        if not 0.0 <= self.holdout_fraction <= 0.5:
            raise ConfigurationError("HOLDOUT_FRACTION must lie in [0, 0.5]")
        if self.prior == "basis" and self.projection == "finite_dim":
            raise ConfigurationError("PRIOR=basis cannot be combined with PROJECTION=finite_dim")
        if self.model == "custom-runtable" and (self.runtable is None or self.field_data is None):
            raise ConfigurationError("MODEL=custom-runtable needs RUNTABLE and FIELD_DATA paths")
        if self.outcomes is not None:
            if self.model != "bivariate" and self.model != "custom-runtable":
                raise ConfigurationError("OUTCOMES only applies to multi-outcome models")
            if not self.outcomes or min(self.outcomes) < 1:
                raise ConfigurationError("OUTCOMES lists one-based outcome numbers")
        if (self.theta_lower is None) != (self.theta_upper is None):
            raise ConfigurationError("THETA_LOWER and THETA_UPPER must be given together")

    @classmethod
    def from_file(cls, path: Union[str, Path], **overrides) -> "ExperimentConfig":
        """Read a KEY=VALUE config file; keys are case-insensitive"""
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        raw = {k.lower(): v for k, v in dotenv_values(path).items()}
        return cls.from_mapping({**raw, **overrides})

    @classmethod
    def from_mapping(cls, raw: Dict) -> "ExperimentConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(types))
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {', '.join(k.upper() for k in unknown)}")
        values = {}
        for key, value in raw.items():
            try:
                values[key] = _parse_value(types[key], value)
            except ValueError as e:
                raise ConfigurationError(f"{key.upper()}={value!r}: {e}") from e
        return cls(**values)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        semantic = {k: v for k, v in self.to_dict().items() if k not in NON_SEMANTIC_FIELDS}
        return hashlib.sha256(json.dumps(semantic, sort_keys=True).encode()).hexdigest()

    def to_settings(self, progress: bool = False, verbose: bool = False) -> CalibrationSettings:
        return CalibrationSettings(
            prior=self.prior,
            projection=self.projection,
            iters=self.iters,
            burnin=self.burnin,
            thin=self.thin,
            gamma=self.gamma,
            psi=self.psi,
            kernel_sigma2=self.kernel_sigma2,
            basis_k=self.basis_k,
            basis_tau2=self.basis_tau2,
            moment_samples=self.moment_samples,
            quadrature_points=self.quadrature_points,
            weighting=self.constraint_points,
            diagnostics=self.diagnostics,
            progress=progress,
            verbose=verbose,
        )


def _parse_value(annotation, value):
    if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
        return None
    if not isinstance(value, str):
        return value
    text = value.strip()
    if annotation is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation == Optional[int]:
        return int(text)
    if annotation == Optional[float]:
        return float(text)
    if annotation == Optional[List[int]]:
        return [int(v) for v in text.split(",") if v.strip()]
    if annotation == Optional[List[float]]:
        return [float(v) for v in text.split(",") if v.strip()]
    return text


@dataclass
class Benchmark:
    """Synthetic field data with the simulator and the true calibration parameter"""

    observations: FieldObservations
    model: ComputerModel
    theta_star: np.ndarray
    noise: NoiseModel
    truth: object = field(repr=False, default=None)
    run_table: Optional[RunTable] = field(repr=False, default=None)


@functools.lru_cache(maxsize=None)
def bivariate_theta_star() -> float:
    m = bivariate()
    return float(population_minimizer(bivariate_truth, m, gauss_legendre_rule(64, m.x_domain))[0])


def benchmark_theta_star(model_id: str) -> np.ndarray:
    """True calibration parameter of a reference benchmark"""
    if model_id == "model1":
        return np.array([MODEL1_THETA_STAR])
    if model_id in ("model2", "model3"):
        return MODEL2_THETA_STAR.copy()
    if model_id == "bivariate":
        return np.array([bivariate_theta_star()])
    raise ConfigurationError(f"Unknown benchmark model {model_id!r}")


def generate_benchmark(model_id: str, n: int = 100, sigma: float = 0.2, seed: SeedLike = None,
                       sigma_offdiag: float = 0.012,
                       grid_size: int = MODEL3_GRID_SIZE) -> Benchmark:
    """
    Design drawn uniformly on [0, 1], field data from the real process plus
    Gaussian noise. model3 returns the exact Model 2 simulator together with
    the grid of runs a surrogate is to be fitted on.
    """
    rng = as_generator(seed)
    if model_id == "model1":
        m, truth = model1(), model1_truth
        noise = NoiseModel.isotropic(sigma)
    elif model_id in ("model2", "model3"):
        m, truth = model2(), model2_truth
        noise = NoiseModel.isotropic(sigma)
    elif model_id == "bivariate":
        m, truth = bivariate(), bivariate_truth
        noise = NoiseModel(bivariate_sigma(sigma, sigma_offdiag))
    else:
        raise ConfigurationError(f"Unknown benchmark model {model_id!r}")

    design = Design.uniform(n, m.x_domain, rng)
    data = sample_field_data(truth, noise, design, rng)
    run_table = None
    if model_id == "model3":
        run_table = RunTable.from_model(m, model3_theta_grid(grid_size), design.points)
    return Benchmark(data, m, benchmark_theta_star(model_id), noise, truth, run_table)


def _theta_domain(config: ExperimentConfig, default: Box) -> Box:
    if config.theta_lower is None:
        return default
    return Box(config.theta_lower, config.theta_upper)


def replicate_benchmark(config: ExperimentConfig, index: int,
                        seed_seq: np.random.SeedSequence) -> ReplicationOutcome:
    """One replication: generate, [fit surrogate], estimate noise, calibrate"""
    rng = np.random.default_rng(seed_seq)
    bench = generate_benchmark(config.model, config.n, config.sigma, rng, config.sigma_offdiag)
    data, m = bench.observations, bench.model
    extra = {}
    if bench.run_table is not None:
        surrogate = fit_surrogate(bench.run_table, config.holdout_fraction, seed=rng)
        m = surrogate_as_model(surrogate, _theta_domain(config, MODEL2_THETA_DOMAIN), m.x_domain)
        if surrogate.holdout_relative_rmse is not None:
            extra["holdout_relative_rmse"] = surrogate.holdout_relative_rmse.tolist()
    if config.outcomes is not None:
        selected = [k - 1 for k in config.outcomes]
        data, m = data.select_outcomes(selected), m.select_outcomes(selected)

    result = calibrate(data, m, config.to_settings(), seed=rng)
    return ReplicationOutcome(
        index=index,
        anchor=result.anchor,
        summary=result.summary,
        covered=result.summary.covers(bench.theta_star),
        sampler_seconds=result.sampler_seconds,
        extra=extra,
        chain=result.chain,
    )


def replicate_bivariate_comparison(config: ExperimentConfig, index: int,
                                   seed_seq: np.random.SeedSequence) -> ReplicationOutcome:
    """Outcome-1, outcome-2 and joint fits on the same bivariate data set"""
    rng = np.random.default_rng(seed_seq)
    bench = generate_benchmark("bivariate", config.n, config.sigma, rng, config.sigma_offdiag)
    settings = config.to_settings()
    sigma_hat = estimate_noise_covariance(bench.observations)
    fits = {}
    for label, outcomes in (("uni1", [0]), ("uni2", [1])):
        fits[label] = calibrate(bench.observations.select_outcomes(outcomes),
                                bench.model.select_outcomes(outcomes), settings,
                                noise=NoiseModel(sigma_hat.sigma_F[np.ix_(outcomes, outcomes)]),
                                seed=rng)
    fits["joint"] = calibrate(bench.observations, bench.model, settings, noise=sigma_hat, seed=rng)

    joint = fits["joint"]
    draws = joint.chain.theta[:, 0]
    lo, hi = BIVARIATE_MASS_INTERVAL
    extra = {
        "sd_uni1": float(fits["uni1"].summary.sd[0]),
        "sd_uni2": float(fits["uni2"].summary.sd[0]),
        "sd_joint": float(joint.summary.sd[0]),
        "mean_uni1": float(fits["uni1"].summary.mean[0]),
        "mean_uni2": float(fits["uni2"].summary.mean[0]),
        "joint_mass": float(np.mean((draws >= lo) & (draws <= hi))),
        "joint_tighter": bool(joint.summary.sd[0] < fits["uni2"].summary.sd[0]),
    }
    if index == 0:
        extra["chains"] = {label: fit.chain for label, fit in fits.items()}
    return ReplicationOutcome(
        index=index,
        anchor=joint.anchor,
        summary=joint.summary,
        covered=joint.summary.covers(bench.theta_star),
        sampler_seconds=joint.sampler_seconds,
        extra=extra,
        chain=joint.chain,
    )


@dataclass
class ResultRecord:
    """Per-replication rows and the aggregate table row of one experiment"""

    config: ExperimentConfig
    theta_star: Optional[np.ndarray]
    table: CoverageTable

    @property
    def config_digest(self) -> str:
        return self.config.digest()

    @property
    def failures(self) -> int:
        return self.table.failures

    @property
    def warning_categories(self) -> List[str]:
        return sorted({w for o in self.table.outcomes for w in o.warnings})

    def replication_frame(self) -> pd.DataFrame:
        rows = []
        for o in self.table.outcomes:
            row = {"replication": o.index, "error": o.error or "",
                   "warnings": ";".join(o.warnings), "sampler_seconds": o.sampler_seconds}
            if not o.failed:
                for j in range(o.summary.mean.size):
                    row[f"anchor_{j + 1}"] = float(o.anchor[j])
                    row[f"mean_{j + 1}"] = float(o.summary.mean[j])
                    row[f"sd_{j + 1}"] = float(o.summary.sd[j])
                    row[f"lower_{j + 1}"] = float(o.summary.credible_intervals[j, 0])
                    row[f"upper_{j + 1}"] = float(o.summary.credible_intervals[j, 1])
                    row[f"ess_{j + 1}"] = float(o.summary.ess[j])
                    if o.covered is not None:
                        row[f"covered_{j + 1}"] = bool(o.covered[j])
                row["acceptance_rate"] = o.summary.acceptance_rate
                for key, value in o.extra.items():
                    if key != "chains" and np.isscalar(value):
                        row[key] = value
            rows.append(row)
        return pd.DataFrame(rows)

    def aggregate(self) -> Dict:
        """Means over successful replications; exactly reproducible from the rows"""
        ok = self.table.succeeded
        if not ok:
            return {"replications": len(self.table.outcomes), "failures": self.failures}
        means = np.array([o.summary.mean for o in ok])
        sds = np.array([o.summary.sd for o in ok])
        result = {
            "replications": len(self.table.outcomes),
            "failures": self.failures,
            "mean": means.mean(axis=0).tolist(),
            "sd": sds.mean(axis=0).tolist(),
            "anchor": np.array([o.anchor for o in ok]).mean(axis=0).tolist(),
            "acceptance_rate": float(np.mean([o.summary.acceptance_rate for o in ok])),
        }
        if self.table.coverage.size:
            result["coverage"] = self.table.coverage.tolist()
        if "joint_tighter" in ok[0].extra:
            result["joint_tighter_fraction"] = float(np.mean([o.extra["joint_tighter"] for o in ok]))
            result["joint_mass_mean"] = float(np.mean([o.extra["joint_mass"] for o in ok]))
        return result

    def summary_dict(self) -> Dict:
        """summary.json contents; wall-clock times are left out so reruns are byte-identical"""
        return {
            "config_digest": self.config_digest,
            "config": {k: v for k, v in self.config.to_dict().items() if k not in NON_SEMANTIC_FIELDS},
            "theta_star": None if self.theta_star is None else np.asarray(self.theta_star).tolist(),
            "aggregate": self.aggregate(),
            "replications": [
                {
                    "replication": o.index,
                    "error": o.error,
                    "warnings": o.warnings,
                    "anchor": None if o.anchor is None else np.asarray(o.anchor).tolist(),
                    "summary": None if o.summary is None else o.summary.to_dict(),
                    "covered": None if o.covered is None else [bool(c) for c in o.covered],
                }
                for o in self.table.outcomes
            ],
        }

    def table_frame(self) -> pd.DataFrame:
        """One row per coordinate: Mean / Std. Dev. / Coverage / Runtime"""
        agg = self.aggregate()
        if "mean" not in agg:
            return pd.DataFrame(columns=["method", "coordinate", "mean", "sd", "coverage", "runtime"])
        method = f"{self.config.prior}-{self.config.projection}"
        rows = []
        for j, mean in enumerate(agg["mean"]):
            rows.append({
                "method": method,
                "coordinate": f"theta_{j + 1}",
                "mean": mean,
                "sd": agg["sd"][j],
                "coverage": agg["coverage"][j] if "coverage" in agg else np.nan,
                "runtime": self.table.mean_runtime,
            })
        return pd.DataFrame(rows)

    def write(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.json", "w", encoding="utf-8") as f:
            json.dump(self.summary_dict(), f, indent=2, sort_keys=True)
        self.table_frame().to_csv(out / "table.csv", index=False)
        self.replication_frame().to_csv(out / "replications.csv", index=False)
        for o in self.table.outcomes:
            if o.chain is not None:
                o.chain.to_frame().to_csv(out / f"chain_{o.index}.csv", index=False)
            for label, chain in o.extra.get("chains", {}).items():
                write_density_files(chain, out, prefix=f"density_{label}")
        first = next((o for o in self.table.outcomes if o.chain is not None), None)
        if first is not None and "chains" not in first.extra:
            write_density_files(first.chain, out)
        return out


def emit_density_data(chain: Union[Chain, np.ndarray], grid_size: int = 256) -> Dict[str, pd.DataFrame]:
    """Kernel density table per coordinate, keyed theta_1..theta_p"""
    draws = chain.theta if isinstance(chain, Chain) else np.asarray(chain, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    if draws.shape[0] == 0:
        raise ConfigurationError("Cannot emit densities for an empty chain")
    return {f"theta_{j + 1}": kernel_density(draws[:, j], grid_size) for j in range(draws.shape[1])}


def write_density_files(chain: Union[Chain, np.ndarray], out_dir: Union[str, Path],
                        prefix: str = "density", grid_size: int = 256) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for coord, frame in emit_density_data(chain, grid_size).items():
        path = out / f"{prefix}_{coord}.csv"
        frame.to_csv(path, index=False)
        paths.append(path)
    return paths


def _custom_problem(config: ExperimentConfig):
    runs = RunTable.from_csv(config.runtable)
    data = FieldObservations.from_csv(config.field_data)
    surrogate = fit_surrogate(runs, config.holdout_fraction, seed=config.seed)
    default_theta = Box(runs.theta.min(axis=0), runs.theta.max(axis=0))
    x_domain = Box(np.minimum(runs.x.min(axis=0), data.design.points.min(axis=0)),
                   np.maximum(runs.x.max(axis=0), data.design.points.max(axis=0)))
    data = FieldObservations(Design(data.design.points, x_domain), data.values)
    m = surrogate_as_model(surrogate, _theta_domain(config, default_theta), x_domain, name="custom")
    if config.outcomes is not None:
        selected = [k - 1 for k in config.outcomes]
        data, m = data.select_outcomes(selected), m.select_outcomes(selected)
    return data, m


def run_experiment(config: ExperimentConfig, progress: bool = False, verbose: bool = False,
                   write: bool = True, compare_outcomes: bool = False) -> ResultRecord:
    """
    Run every replication of config and write summary.json, table.csv,
    replications.csv, chain_<r>.csv and density files to config.output_dir.
    """
    if verbose:
        print("=" * 60)
        print(f"🚀 {config.model} | prior={config.prior} | projection={config.projection}")
        print(f"   n={config.n}, iters={config.iters}, burnin={config.burnin}, "
              f"replications={config.replications}, seed={config.seed}")
        print("=" * 60)

    if config.model == "custom-runtable":
        data, m = _custom_problem(config)
        table = _single_calibration(config, data, m, progress)
        theta_star = None
    else:
        if compare_outcomes:
            if config.model != "bivariate":
                raise ConfigurationError("Outcome comparison applies to the bivariate model only")
            replicate = functools.partial(replicate_bivariate_comparison, config)
        else:
            replicate = functools.partial(replicate_benchmark, config)
        table = coverage_experiment(replicate, config.replications, config.seed,
                                    config.workers, progress)
        theta_star = benchmark_theta_star(config.model)

    record = ResultRecord(config, theta_star, table)
    if write:
        out = record.write(config.output_dir)
        if verbose:
            print(f"💾 Results written to {out}")
    if verbose:
        agg = record.aggregate()
        print(f"📊 Mean {np.round(agg.get('mean', []), 4)}  SD {np.round(agg.get('sd', []), 4)}  "
              f"coverage {np.round(agg.get('coverage', []), 3)}  failures {record.failures}")
    return record


def _single_calibration(config: ExperimentConfig, data: FieldObservations, m: ComputerModel,
                        progress: bool) -> CoverageTable:
    """Real data has no known theta, so it is calibrated once and nothing is covered"""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = calibrate(data, m, config.to_settings(progress=progress), seed=config.seed)
    outcome = ReplicationOutcome(
        index=0,
        anchor=result.anchor,
        summary=result.summary,
        sampler_seconds=result.sampler_seconds,
        warnings=sorted({w.category.__name__ for w in caught}),
        chain=result.chain,
    )
    return CoverageTable([outcome], np.array([]), result.sampler_seconds)
