"""
Calibration engine: anchor estimation, the projection sampler and posterior summaries
"""

import time
import warnings
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.stats import qmc
from tqdm import tqdm

from .diagnostics import effective_sample_size, equal_tailed_interval
from .emulator import estimate_noise_covariance
from .errors import (
    AcceptanceRateWarning,
    ConfigurationError,
    ExperimentError,
    IntervalWarning,
    ModelEvaluationError,
    NumericalError,
    OptimizationError,
)
from .models import (
    ComputerModel,
    ConstraintSet,
    FieldObservations,
    NoiseModel,
    build_constraint_set,
)
from .numerics import (
    Box,
    QuadratureRule,
    SeedLike,
    as_generator,
    cholesky_factor,
    gauss_legendre_rule,
)
from .priors import (
    BasisExpansionPrior,
    BiasDraw,
    BiasPrior,
    GaussianProcessPrior,
    MaternKernel,
    OrthogonalGaussianProcessPrior,
    ogp_kernel,
)
from .projection import (
    ProjectionReport,
    WhitenedProjector,
    constraint_matrix,
    functional_project,
    moment_project_nongaussian,
)

PROJECTIONS = ("functional", "finite_dim", "moment")
PRIORS = ("gp", "basis", "ogp")
CONSTRAINT_TOLERANCE = 1e-8
ACCEPTANCE_BOUNDS = (0.05, 0.7)
TARGET_ACCEPTANCE = 0.3
MIN_SUMMARY_DRAWS = 100
FAILURE_THRESHOLD = 0.1


@dataclass(frozen=True)
class ThetaPrior:
    """Independent N(mean, gamma^2) per coordinate, truncated to Theta"""

    domain: Box
    gamma: float = 10.0
    mean: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")

    def _bounds(self):
        a = (self.domain.lower - self.mean) / self.gamma
        b = (self.domain.upper - self.mean) / self.gamma
        return a, b

    def logpdf(self, t: np.ndarray) -> float:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if not self.domain.contains(t):
            return -np.inf
        a, b = self._bounds()
        return float(np.sum(stats.truncnorm.logpdf(t, a, b, loc=self.mean, scale=self.gamma)))

    def sample(self, size: int, seed: SeedLike = None) -> np.ndarray:
        a, b = self._bounds()
        return stats.truncnorm.rvs(a, b, loc=self.mean, scale=self.gamma,
                                   size=(int(size), self.domain.dim), random_state=as_generator(seed))

    def cdf(self, t: np.ndarray, j: int = 0) -> np.ndarray:
        a, b = self._bounds()
        return stats.truncnorm.cdf(t, a[j], b[j], loc=self.mean, scale=self.gamma)


def l2_loss(target: Union[Callable[[np.ndarray], np.ndarray], FieldObservations],
            m: ComputerModel, t: np.ndarray, rule: Optional[QuadratureRule] = None) -> float:
    """
    Population loss sum_k int (y_R,k - f_k(., t))^2 dx for a callable target,
    or the mean squared residual over the n * q field values.
    """
    if isinstance(target, FieldObservations):
        residuals = target.values - m.evaluate(target.design.points, t)
        return float(np.mean(residuals ** 2))
    if rule is None:
        rule = gauss_legendre_rule(domain=m.x_domain)
    truth = np.asarray(target(rule.nodes), dtype=float).reshape(rule.n_nodes, -1)
    residuals = truth - m.evaluate(rule.nodes, t)
    return float(np.sum(rule.integrate(residuals ** 2)))


def _multistart_minimize(objective: Callable[[np.ndarray], float], domain: Box, n_starts: int,
                         seed: SeedLike, xatol: float = 1e-6):
    sampler = qmc.LatinHypercube(d=domain.dim, seed=as_generator(seed))
    starts = domain.scale_unit(sampler.random(n_starts))
    bounds = list(zip(domain.lower, domain.upper))
    best, failures = None, []

    def safe(t):
        try:
            value = objective(t)
        except ModelEvaluationError:
            return np.inf
        return value if np.isfinite(value) else np.inf

    for start in starts:
        result = optimize.minimize(
            safe, start, method="Nelder-Mead", bounds=bounds,
            options={"xatol": xatol, "fatol": 1e-10, "maxiter": 4000 * domain.dim},
        )
        if not result.success or not np.isfinite(result.fun):
            failures.append(f"start {np.round(start, 4)}: {result.message}")
            continue
        if best is None or result.fun < best.fun:
            best = result
    if best is None:
        raise OptimizationError("No optimizer start converged:\n  " + "\n  ".join(failures))
    return domain.clip(best.x), float(best.fun)


def estimate_anchor(field: FieldObservations, m: ComputerModel, n_starts: int = 10,
                    seed: SeedLike = 0, verbose: bool = False) -> np.ndarray:
    """
    theta_tilde = argmin_t (1/nq) sum ||y_F(x_i) - f(x_i, t)||^2 by Nelder-Mead
    from Latin-hypercube starts over Theta.
    """
    anchor, loss = _multistart_minimize(lambda t: l2_loss(field, m, t), m.theta_domain,
                                        n_starts, seed)
    if verbose:
        print(f"⚓ Anchor {np.round(anchor, 5)} (empirical loss {loss:.5g})")
    return anchor


def population_minimizer(truth: Callable[[np.ndarray], np.ndarray], m: ComputerModel,
                         rule: Optional[QuadratureRule] = None, n_starts: int = 10,
                         seed: SeedLike = 0) -> np.ndarray:
    """theta* = argmin_t of the population L2 loss"""
    rule = rule or gauss_legendre_rule(domain=m.x_domain)
    theta, _ = _multistart_minimize(lambda t: l2_loss(truth, m, t, rule), m.theta_domain,
                                    n_starts, seed, xatol=1e-8)
    return theta


def emit_loss_profile(truth: Callable[[np.ndarray], np.ndarray], m: ComputerModel,
                      rule: Optional[QuadratureRule], grid: np.ndarray) -> pd.DataFrame:
    """Per-outcome population loss over a grid of parameter values"""
    rule = rule or gauss_legendre_rule(domain=m.x_domain)
    grid = np.asarray(grid, dtype=float).reshape(-1, m.p)
    target = np.asarray(truth(rule.nodes), dtype=float).reshape(rule.n_nodes, -1)
    rows = []
    for t in grid:
        per_outcome = np.atleast_1d(rule.integrate((target - m.evaluate(rule.nodes, t)) ** 2))
        row = {f"theta_{j + 1}": t[j] for j in range(m.p)}
        row.update({f"loss_{k + 1}": per_outcome[k] for k in range(per_outcome.size)})
        row["loss"] = float(per_outcome.sum())
        rows.append(row)
    return pd.DataFrame(rows)


class AdaptiveMetropolis:
    """
    Random-walk Metropolis with Haario-style covariance adaptation.

    Proposals use the initial covariance until adaptation starts, then
    exp(log_lambda) * 2.38^2 / p * (empirical covariance + regularization).
    log_lambda follows a Robbins-Monro recursion towards the target
    acceptance rate with step size count^-eta. freeze() fixes the proposal.
    """

    def __init__(self, x0: np.ndarray, domain: Box, initial_cov: Optional[np.ndarray] = None,
                 target_acceptance: float = TARGET_ACCEPTANCE, adapt_start: int = 100,
                 eta: float = 0.6, regularization: float = 1e-6):
        self.domain = domain
        self.x = domain.clip(np.atleast_1d(np.asarray(x0, dtype=float)))
        self.p = self.x.size
        widths2 = domain.widths ** 2
        self.initial_cov = (np.diag(0.01 ** 2 * widths2) if initial_cov is None
                            else np.atleast_2d(np.asarray(initial_cov, dtype=float)))
        self.target_acceptance = target_acceptance
        self.adapt_start = int(adapt_start)
        self.eta = eta
        self._regularization = regularization * np.diag(widths2)
        self._scale = 2.38 ** 2 / self.p
        self._mean = self.x.copy()
        self._m2 = np.zeros((self.p, self.p))
        self._count = 1
        self._log_lambda = 0.0
        self._adaptations = 0
        self._frozen_cov: Optional[np.ndarray] = None
        self.iteration = 0
        self.accepted = 0

    @property
    def frozen(self) -> bool:
        return self._frozen_cov is not None

    @property
    def log_lambda(self) -> float:
        return self._log_lambda

    @property
    def empirical_cov(self) -> np.ndarray:
        if self._count < 2:
            return np.zeros((self.p, self.p))
        return self._m2 / (self._count - 1)

    @property
    def proposal_cov(self) -> np.ndarray:
        if self._frozen_cov is not None:
            return self._frozen_cov
        if self._adaptations == 0:
            return self.initial_cov
        return np.exp(self._log_lambda) * self._scale * (self.empirical_cov + self._regularization)

    def freeze(self):
        self._frozen_cov = self.proposal_cov.copy()

    def step(self, log_target: Callable[[np.ndarray], float], current: float,
             rng: np.random.Generator):
        """
        One Metropolis step from self.x.

        Returns:
            (log target at the new state, accepted flag)
        """
        chol = cholesky_factor(self.proposal_cov)
        proposal = self.x + chol @ rng.standard_normal(self.p)
        log_new = log_target(proposal) if self.domain.contains(proposal) else -np.inf
        if np.isnan(log_new):
            raise NumericalError(f"Log target is NaN at {proposal}")
        log_ratio = log_new - current
        alpha = 1.0 if log_ratio >= 0 else float(np.exp(log_ratio))
        accepted = bool(np.log(rng.uniform()) < log_ratio)
        if accepted:
            self.x = proposal
            current = log_new
            self.accepted += 1
        self.iteration += 1
        if not self.frozen:
            self._adapt(alpha)
        return current, accepted

    def _adapt(self, alpha: float):
        self._count += 1
        delta = self.x - self._mean
        self._mean += delta / self._count
        self._m2 += np.outer(delta, self.x - self._mean)
        if self.iteration >= self.adapt_start:
            self._adaptations += 1
            gamma = self._adaptations ** -self.eta
            self._log_lambda = float(np.clip(
                self._log_lambda + gamma * (alpha - self.target_acceptance), -20.0, 20.0))


@dataclass
class ChainState:
    """State carried between iterations of the projection sampler"""

    theta: np.ndarray
    bias: Optional[BiasDraw]
    proposal_cov: np.ndarray
    accept_count: int = 0
    iter: int = 0


@dataclass
class Chain:
    """Post burn-in output of the projection sampler"""

    iterations: np.ndarray
    theta: np.ndarray
    loglik: np.ndarray
    accepted: np.ndarray
    max_constraint_residual: np.ndarray
    acceptance_rate: float
    lambdas: Optional[np.ndarray] = None
    gram_condition: Optional[np.ndarray] = None
    biases: List[BiasDraw] = field(default_factory=list, repr=False)
    final_state: Optional[ChainState] = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.theta.shape[1]

    def __len__(self) -> int:
        return self.theta.shape[0]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"iter": self.iterations})
        for j in range(self.p):
            frame[f"theta_{j + 1}"] = self.theta[:, j]
        frame["loglik"] = self.loglik
        frame["accept"] = self.accepted.astype(int)
        frame["max_constraint_residual"] = self.max_constraint_residual
        if self.lambdas is not None:
            for j in range(self.lambdas.shape[1]):
                frame[f"lambda_{j + 1}"] = self.lambdas[:, j]
        if self.gram_condition is not None:
            frame["gram_condition"] = self.gram_condition
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "Chain":
        theta_cols = sorted((c for c in frame.columns if c.startswith("theta_")),
                            key=lambda c: int(c.split("_")[1]))
        accepted = frame["accept"].to_numpy(dtype=bool) if "accept" in frame else np.zeros(len(frame), bool)
        return cls(
            iterations=frame["iter"].to_numpy() if "iter" in frame else np.arange(len(frame)),
            theta=frame[theta_cols].to_numpy(dtype=float),
            loglik=frame["loglik"].to_numpy(dtype=float) if "loglik" in frame else np.zeros(len(frame)),
            accepted=accepted,
            max_constraint_residual=(frame["max_constraint_residual"].to_numpy(dtype=float)
                                     if "max_constraint_residual" in frame else np.zeros(len(frame))),
            acceptance_rate=float(accepted.mean()) if len(frame) else 0.0,
        )


def _gaussian_loglik(residuals: np.ndarray, precision: np.ndarray, log_norm: float) -> float:
    return float(-0.5 * np.sum((residuals @ precision) * residuals) + log_norm)


def run_projection_sampler(field: FieldObservations, m: ComputerModel, prior: BiasPrior,
                           theta_prior: ThetaPrior, cs: ConstraintSet, iters: int = 5000,
                           burnin: int = 1000, seed: SeedLike = None,
                           noise: Optional[NoiseModel] = None, projection: str = "functional",
                           moment_samples: Optional[int] = None, weighting: str = "quadrature",
                           likelihood: bool = True, thin: int = 1, keep_bias: bool = False,
                           diagnostics: bool = False, progress: bool = False) -> Chain:
    """
    Gibbs sampler alternating a conditional bias draw, its projection onto
    the orthogonality set at the anchor, and an adaptive Metropolis update
    of theta given the projected bias.

    Args:
        field: Field data (whitened when q > 1)
        m: Computer model in the same units as field
        prior: Bias prior
        theta_prior: Prior on theta, truncated to Theta
        cs: Constraint set built at the anchor
        iters: Total iterations including burn-in
        burnin: Iterations discarded; proposal adaptation stops after them
        seed: Seed or Generator
        noise: Noise model (identity when None)
        projection: "functional", "finite_dim" or "moment"
        moment_samples: Samples per moment projection (default 10 per dimension)
        weighting: Constraint vectors for the finite-dimensional projections
        likelihood: When False theta is updated from its prior alone
        thin: Keep every thin-th post burn-in state
        keep_bias: Store the projected bias draws
        diagnostics: Store the multipliers and Gram conditioning per draw
        progress: Show a tqdm progress bar

    Returns:
        Chain of post burn-in states
    """
    if not iters > burnin >= 0:
        raise ConfigurationError(f"Need iters > burnin >= 0, got iters={iters}, burnin={burnin}")
    if thin < 1:
        raise ConfigurationError(f"thin must be >= 1, got {thin}")
    if projection not in PROJECTIONS:
        raise ConfigurationError(f"Unknown projection {projection!r}")
    if projection == "finite_dim" and not getattr(prior, "is_gaussian_conditional", False):
        raise ConfigurationError("finite_dim projection needs a prior with a Gaussian conditional")

    rng = as_generator(seed)
    design = field.design
    rule = cs.rule
    noise = noise or NoiseModel.identity(field.q)
    if cs.design_gradients is None or cs.design_gradients.shape[1] != design.n:
        cs = ConstraintSet(cs.anchor, cs.gradients, cs.gram,
                           m.partial_derivatives(design.points, cs.anchor), design)

    precision = noise.precision() if likelihood else None
    log_norm = 0.0
    if likelihood:
        _, logdet = np.linalg.slogdet(2.0 * np.pi * noise.sigma_F)
        log_norm = -0.5 * design.n * logdet

    A = None
    fd_projector = None
    operator = None
    if projection != "functional":
        A = constraint_matrix(cs, design.n, weighting)
    if projection == "finite_dim":
        operator = prior.conditional_operator(design, rule, noise)
        fd_projector = WhitenedProjector(operator.covariance, A)
        fd_root = fd_projector.square_root()
    if projection == "moment" and moment_samples is None:
        moment_samples = 10 * A.shape[0]

    sampler = AdaptiveMetropolis(cs.anchor, theta_prior.domain,
                                 adapt_start=min(100, burnin // 2))
    if burnin == 0:
        sampler.freeze()
    theta = sampler.x.copy()
    f_current = m.evaluate(design.points, theta)

    kept = []
    post_accepts = 0
    bias = None
    for i in tqdm(range(iters), desc="Sampling", disable=not progress):
        residuals = field.values - f_current

        if projection == "functional":
            bias, report = functional_project(prior.conditional_draw(residuals, noise, design, rule, rng), cs)
        elif projection == "finite_dim":
            mean = fd_projector.project(operator.mean(residuals))
            vector = mean + fd_root @ rng.standard_normal(fd_root.shape[1])
            bias = BiasDraw.from_stacked(vector, design.n, rule, field.q, provenance="projected")
            report = fd_projector.report(vector, vector)
        else:
            result = moment_project_nongaussian(prior, residuals, noise, design, cs,
                                                moment_samples, rng, weighting)
            bias, report = result.draw, result.report

        if report.relative_residual > CONSTRAINT_TOLERANCE:
            raise NumericalError(
                f"Projected bias violates the orthogonality constraint at iteration {i} "
                f"(relative residual {report.relative_residual:.3g})"
            )

        cache = {}

        def log_target(t, bias_values=bias.design_values):
            log_prior = theta_prior.logpdf(t)
            if not np.isfinite(log_prior) or not likelihood:
                return log_prior
            values = m.evaluate(design.points, t)
            cache["f"] = values
            return log_prior + _gaussian_loglik(field.values - values - bias_values, precision, log_norm)

        if likelihood:
            loglik = _gaussian_loglik(field.values - f_current - bias.design_values, precision, log_norm)
            if not np.isfinite(loglik):
                raise NumericalError(f"Non-finite log-likelihood at iteration {i}")
            current = theta_prior.logpdf(theta) + loglik
        else:
            loglik = 0.0
            current = theta_prior.logpdf(theta)

        try:
            _, accepted = sampler.step(log_target, current, rng)
        except NumericalError as e:
            raise NumericalError(f"Iteration {i}: {e}") from e
        if accepted:
            theta = sampler.x.copy()
            if likelihood:
                f_current = cache["f"]
                loglik = _gaussian_loglik(field.values - f_current - bias.design_values,
                                          precision, log_norm)
            else:
                f_current = m.evaluate(design.points, theta)

        if i + 1 == burnin:
            sampler.freeze()
        if i >= burnin:
            post_accepts += int(accepted)
            if (i - burnin) % thin == 0:
                kept.append((i, theta.copy(), loglik, accepted, report, bias if keep_bias else None))

    post = iters - burnin
    acceptance_rate = post_accepts / post
    if likelihood and not ACCEPTANCE_BOUNDS[0] <= acceptance_rate <= ACCEPTANCE_BOUNDS[1]:
        warnings.warn(
            f"Post burn-in acceptance rate {acceptance_rate:.3f} outside "
            f"[{ACCEPTANCE_BOUNDS[0]}, {ACCEPTANCE_BOUNDS[1]}]",
            AcceptanceRateWarning,
            stacklevel=2,
        )

    reports: List[ProjectionReport] = [k[4] for k in kept]
    return Chain(
        iterations=np.array([k[0] for k in kept]),
        theta=np.array([k[1] for k in kept]),
        loglik=np.array([k[2] for k in kept]),
        accepted=np.array([k[3] for k in kept], dtype=bool),
        max_constraint_residual=np.array([float(np.max(np.abs(r.constraint_residuals))) for r in reports]),
        acceptance_rate=acceptance_rate,
        lambdas=np.array([r.lambda_ for r in reports]) if diagnostics else None,
        gram_condition=np.array([r.gram_condition for r in reports]) if diagnostics else None,
        biases=[k[5] for k in kept] if keep_bias else [],
        final_state=ChainState(theta.copy(), bias, sampler.proposal_cov.copy(),
                               sampler.accepted, sampler.iteration),
    )


@dataclass
class PosteriorSummary:
    """Posterior moments, equal-tailed intervals and ESS per coordinate"""

    mean: np.ndarray
    sd: np.ndarray
    credible_intervals: np.ndarray
    ess: np.ndarray
    acceptance_rate: Optional[float]
    level: float = 0.95
    n_draws: int = 0

    def covers(self, theta_star: Sequence[float]) -> np.ndarray:
        theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
        lower, upper = self.credible_intervals[:, 0], self.credible_intervals[:, 1]
        return (lower <= theta_star) & (theta_star <= upper)

    def to_dict(self) -> Dict:
        return {
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
            "credible_intervals": self.credible_intervals.tolist(),
            "ess": self.ess.tolist(),
            "acceptance_rate": self.acceptance_rate,
            "level": self.level,
            "n_draws": self.n_draws,
        }


def summarize_chain(chain: Union[Chain, np.ndarray], level: float = 0.95) -> PosteriorSummary:
    """Mean, SD, equal-tailed level-intervals, ESS and acceptance rate of a chain"""
    if isinstance(chain, Chain):
        draws, acceptance = chain.theta, chain.acceptance_rate
    else:
        draws, acceptance = np.asarray(chain, dtype=float), None
        if draws.ndim == 1:
            draws = draws[:, None]
    if draws.shape[0] < MIN_SUMMARY_DRAWS:
        raise ConfigurationError(
            f"Summaries need at least {MIN_SUMMARY_DRAWS} draws, got {draws.shape[0]}"
        )
    if not 0 < level < 1:
        raise ConfigurationError(f"level must lie in (0, 1), got {level}")

    mean = draws.mean(axis=0)
    sd = draws.std(axis=0, ddof=1)
    intervals = np.array([equal_tailed_interval(draws[:, j], level) for j in range(draws.shape[1])])
    ess = np.array([effective_sample_size(draws[:, j]) for j in range(draws.shape[1])])
    outside = (mean < intervals[:, 0]) | (mean > intervals[:, 1])
    if np.any(outside):
        warnings.warn(f"Posterior mean outside its {level:.0%} interval for coordinates "
                      f"{np.flatnonzero(outside).tolist()}", IntervalWarning, stacklevel=2)
    return PosteriorSummary(mean, sd, intervals, ess, acceptance, level, draws.shape[0])


@dataclass
class CalibrationSettings:
    """Choices for one end-to-end calibration"""

    prior: str = "gp"
    projection: str = "functional"
    iters: int = 5000
    burnin: int = 1000
    thin: int = 1
    gamma: float = 10.0
    psi: float = 0.5
    kernel_sigma2: Optional[float] = None
    basis_k: int = 12
    basis_tau2: float = 1.0
    moment_samples: Optional[int] = None
    quadrature_points: int = 32
    weighting: str = "quadrature"
    level: float = 0.95
    n_starts: int = 10
    likelihood: bool = True
    keep_bias: bool = False
    diagnostics: bool = False
    progress: bool = False
    verbose: bool = False

    def __post_init__(self):
        if self.prior not in PRIORS:
            raise ConfigurationError(f"Unknown prior {self.prior!r}; choose from {PRIORS}")
        if self.projection not in PROJECTIONS:
            raise ConfigurationError(f"Unknown projection {self.projection!r}; choose from {PROJECTIONS}")
        if self.prior == "basis" and self.projection == "finite_dim":
            raise ConfigurationError("The basis prior is sampled through the moment projection, "
                                     "not the Gaussian finite-dimensional one")


@dataclass
class CalibrationResult:
    anchor: np.ndarray
    summary: PosteriorSummary
    chain: Chain
    noise: NoiseModel
    sampler_seconds: float
    constraints: ConstraintSet = field(repr=False)


def build_prior(settings: CalibrationSettings, q: int, noise: NoiseModel, x_domain: Box,
                cs: Optional[ConstraintSet] = None) -> BiasPrior:
    """Prior named by the settings; the kernel variance defaults to the noise variance"""
    sigma2 = settings.kernel_sigma2
    if sigma2 is None:
        sigma2 = float(np.mean(noise.variances))
    if settings.prior == "basis":
        return BasisExpansionPrior(settings.basis_k, settings.basis_tau2, x_domain)
    kernel = MaternKernel(sigma2=sigma2, psi=settings.psi)
    if settings.prior == "ogp":
        if cs is None:
            raise ConfigurationError("The OGP prior needs the constraint set")
        return OrthogonalGaussianProcessPrior(ogp_kernel(kernel, cs, cs.rule))
    return GaussianProcessPrior(kernel, q=q)


def calibrate(field: FieldObservations, m: ComputerModel, settings: Optional[CalibrationSettings] = None,
              noise: Optional[NoiseModel] = None, seed: SeedLike = None) -> CalibrationResult:
    """
    Full modular pipeline: plug-in noise, anchor, constraint set, prior and
    projection sampler. With q > 1 data, model and gradients are whitened by
    Sigma_F^{-1/2} first so the sampler sees identity noise. Analytic model
    gradients are checked against central differences before anything runs.
    """
    settings = settings or CalibrationSettings()
    rng = as_generator(seed)
    m.check_gradients()
    if noise is None:
        noise = estimate_noise_covariance(field, verbose=settings.verbose)

    if field.q > 1:
        whitening = noise.whitening_matrix()
        field_s, model_s, noise_s = field.whitened(whitening), m.whitened(whitening), NoiseModel.identity(field.q)
    else:
        field_s, model_s, noise_s = field, m, noise

    anchor = estimate_anchor(field_s, model_s, settings.n_starts, rng, verbose=settings.verbose)
    rule = gauss_legendre_rule(settings.quadrature_points, m.x_domain)
    cs = build_constraint_set(model_s, anchor, rule, field.design, verbose=settings.verbose)
    prior = build_prior(settings, field.q, noise_s, m.x_domain, cs)
    theta_prior = ThetaPrior(m.theta_domain, settings.gamma)

    start = time.perf_counter()
    chain = run_projection_sampler(
        field_s, model_s, prior, theta_prior, cs, settings.iters, settings.burnin, rng,
        noise=noise_s, projection=settings.projection, moment_samples=settings.moment_samples,
        weighting=settings.weighting, likelihood=settings.likelihood, thin=settings.thin,
        keep_bias=settings.keep_bias, diagnostics=settings.diagnostics, progress=settings.progress,
    )
    elapsed = time.perf_counter() - start
    summary = summarize_chain(chain, settings.level)
    if settings.verbose:
        print(f"✅ Posterior mean {np.round(summary.mean, 4)}, SD {np.round(summary.sd, 4)}, "
              f"acceptance {chain.acceptance_rate:.2f}, {elapsed:.1f}s")
    return CalibrationResult(anchor, summary, chain, noise, elapsed, cs)


@dataclass
class ReplicationOutcome:
    """What one replication of an experiment produced"""

    index: int
    anchor: Optional[np.ndarray] = None
    summary: Optional[PosteriorSummary] = None
    covered: Optional[np.ndarray] = None
    sampler_seconds: float = 0.0
    warnings: List[str] = field(default_factory=list)
    error: Optional[str] = None
    extra: Dict = field(default_factory=dict)
    chain: Optional[Chain] = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class CoverageTable:
    outcomes: List[ReplicationOutcome]
    coverage: np.ndarray
    mean_runtime: float

    @property
    def failures(self) -> int:
        return sum(o.failed for o in self.outcomes)

    @property
    def succeeded(self) -> List[ReplicationOutcome]:
        return [o for o in self.outcomes if not o.failed]


def _run_replication(replicate: Callable[[int, np.random.SeedSequence], ReplicationOutcome],
                     index: int, seed_seq: np.random.SeedSequence) -> ReplicationOutcome:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            outcome = replicate(index, seed_seq)
        except Exception as e:
            outcome = ReplicationOutcome(index=index, error=f"{type(e).__name__}: {e}")
    outcome.warnings = sorted({w.category.__name__ for w in caught} | set(outcome.warnings))
    return outcome


def coverage_experiment(replicate: Callable[[int, np.random.SeedSequence], ReplicationOutcome],
                        replications: int, seed: int = 0, workers: int = 1,
                        progress: bool = False) -> CoverageTable:
    """
    Run replications on independent SeedSequence substreams and tabulate
    interval coverage.

    replicate(index, seed_seq) must be picklable when workers > 1. Failed
    replications are recorded; more than 10% failures raise ExperimentError.
    """
    if replications < 2:
        raise ConfigurationError(f"Coverage needs at least 2 replications, got {replications}")
    streams = np.random.SeedSequence(seed).spawn(replications)
    outcomes: List[Optional[ReplicationOutcome]] = [None] * replications

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_replication, replicate, r, streams[r]): r
                       for r in range(replications)}
            for future in tqdm(as_completed(futures), total=replications, desc="Replications",
                               disable=not progress):
                outcomes[futures[future]] = future.result()
    else:
        for r in tqdm(range(replications), desc="Replications", disable=not progress):
            outcomes[r] = _run_replication(replicate, r, streams[r])

    table = _tabulate(outcomes)
    if table.failures > FAILURE_THRESHOLD * replications:
        first = next(o.error for o in outcomes if o.failed)
        raise ExperimentError(
            f"{table.failures} of {replications} replications failed (first: {first})"
        )
    return table


def _tabulate(outcomes: List[ReplicationOutcome]) -> CoverageTable:
    ok = [o for o in outcomes if not o.failed and o.covered is not None]
    coverage = np.mean([o.covered for o in ok], axis=0) if ok else np.array([])
    runtime = float(np.mean([o.sampler_seconds for o in ok])) if ok else 0.0
    return CoverageTable(outcomes, np.atleast_1d(coverage), runtime)
