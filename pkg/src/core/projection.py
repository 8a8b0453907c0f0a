"""
Projection of bias draws onto the orthogonality set
"""

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg

from .errors import (
    ConfigurationError,
    ContractViolationError,
    DimensionError,
    RankDeficiencyWarning,
)
from .models import ConstraintSet, Design, NoiseModel
from .numerics import (
    RANK_RTOL,
    GridFunction,
    SeedLike,
    as_generator,
    cholesky_factor,
    condition_number,
    solve_spd,
)
from .priors import BiasDraw, BiasPrior

GRAM_CONDITION_LIMIT = 1e12
MOMENT_SAMPLES_PER_DIMENSION = 10
MOMENT_RIDGE = 1e-8
WEIGHTINGS = ("quadrature", "design")


@dataclass
class ProjectionReport:
    """Multipliers and post-projection constraint values for one projection"""

    lambda_: np.ndarray
    constraint_residuals: np.ndarray
    gram_condition: float
    relative_residual: float = 0.0
    rank_deficient: bool = False

    def to_dict(self) -> Dict:
        return {
            "lambda": self.lambda_.tolist(),
            "constraint_residuals": self.constraint_residuals.tolist(),
            "gram_condition": self.gram_condition,
            "relative_residual": self.relative_residual,
            "rank_deficient": self.rank_deficient,
        }


def _relative(residuals: np.ndarray, scales: np.ndarray) -> float:
    scales = np.where(scales > 0, scales, 1.0)
    return float(np.max(np.abs(residuals) / scales)) if residuals.size else 0.0


def functional_project(b: BiasDraw, cs: ConstraintSet) -> Tuple[BiasDraw, ProjectionReport]:
    """
    b* = b - sum_j lambda_j g_j with Q lambda = eta, eta_j = <b, g_j>.

    Design values are corrected by the same combination of gradients
    evaluated at the design points.
    """
    if not b.rule.same_as(cs.rule):
        raise DimensionError("Bias draw and constraint set use different quadrature rules")
    if b.q != cs.q:
        raise DimensionError(f"Bias draw has q={b.q}, constraint set q={cs.q}")

    eta = cs.functionals(b.grid_values)
    gram_condition = condition_number(cs.gram)
    lam = solve_spd(cs.gram, eta)

    grid = b.grid_values.values - np.tensordot(lam, cs.grid_values(), axes=1)
    design_values = b.design_values
    if b.n > 0:
        if cs.design_gradients is None or cs.design_gradients.shape[1] != b.n:
            raise ContractViolationError("Constraint set carries no gradients for this design")
        design_values = design_values - np.tensordot(lam, cs.design_gradients, axes=1)

    projected = BiasDraw(design_values, GridFunction(grid, cs.rule), "projected")
    residuals = cs.functionals(projected.grid_values)
    b_norm = b.grid_values.norm()
    scales = np.array([b_norm * g.norm() for g in cs.gradients])
    report = ProjectionReport(
        lambda_=np.atleast_1d(lam),
        constraint_residuals=residuals,
        gram_condition=gram_condition,
        relative_residual=_relative(residuals, scales),
        rank_deficient=gram_condition > GRAM_CONDITION_LIMIT,
    )
    return projected, report


class WhitenedProjector:
    """
    Projection x -> L (I - P_B) L^{-1} x with cov = L L^T and B = L^T A.

    The image satisfies A^T x = 0 exactly in exact arithmetic; L (I - P_B) is
    a square root of the constrained covariance.
    """

    def __init__(self, cov: np.ndarray, A: np.ndarray, jitter: Optional[float] = None):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        A = np.asarray(A, dtype=float)
        if A.ndim == 1:
            A = A[:, None]
        if cov.shape[0] != cov.shape[1] or A.shape[0] != cov.shape[0]:
            raise ContractViolationError(
                f"Constraint matrix {A.shape} does not match covariance {cov.shape}"
            )
        self.A = A
        self.chol = cholesky_factor(cov, jitter)
        B = self.chol.T @ A
        u, s, _ = linalg.svd(B, full_matrices=False)
        keep = s > RANK_RTOL ** 0.5 * s[0] if s.size and s[0] > 0 else np.zeros(s.size, dtype=bool)
        self.rank_deficient = bool(not np.all(keep))
        if self.rank_deficient:
            warnings.warn(
                "Constraint matrix is rank deficient in the whitened metric; projecting onto its range",
                RankDeficiencyWarning,
                stacklevel=2,
            )
        self.basis = u[:, keep]
        self._B = B
        gram = B.T @ B
        self.gram_condition = condition_number(gram) if gram.size else float("inf")

    @property
    def dim(self) -> int:
        return self.chol.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.dim:
            raise ContractViolationError(f"Vector has {x.shape[0]} entries, projector expects {self.dim}")
        white = linalg.solve_triangular(self.chol, x, lower=True)
        white = white - self.basis @ (self.basis.T @ white)
        return self.chol @ white

    def multipliers(self, x: np.ndarray) -> np.ndarray:
        """lambda with x - project(x) = cov A lambda"""
        white = linalg.solve_triangular(self.chol, np.asarray(x, dtype=float), lower=True)
        return np.linalg.lstsq(self._B, white, rcond=None)[0]

    def square_root(self) -> np.ndarray:
        """L (I - P_B)"""
        return self.chol - (self.chol @ self.basis) @ self.basis.T

    def report(self, original: np.ndarray, projected: np.ndarray) -> ProjectionReport:
        residuals = self.A.T @ projected
        scales = np.linalg.norm(self.A, axis=0) * np.linalg.norm(original)
        return ProjectionReport(
            lambda_=self.multipliers(original),
            constraint_residuals=residuals,
            gram_condition=self.gram_condition,
            relative_residual=_relative(residuals, scales),
            rank_deficient=self.rank_deficient,
        )


def finite_dim_project_gaussian(mean: np.ndarray, cov: np.ndarray,
                                A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Law of X ~ N(mean, cov) conditioned on A^T X = 0.

    Returns:
        (mean*, cov*) with mean* = mean - cov A (A^T cov A)^{-1} A^T mean and
        cov* = L (I - P_B) (I - P_B)^T L^T
    """
    mean = np.asarray(mean, dtype=float)
    if mean.ndim != 1:
        raise ContractViolationError("mean must be a vector")
    projector = WhitenedProjector(cov, A, jitter=0.0 if _is_well_posed(cov) else None)
    root = projector.square_root()
    cov_star = root @ root.T
    return projector.project(mean), 0.5 * (cov_star + cov_star.T)


def _is_well_posed(cov: np.ndarray) -> bool:
    try:
        linalg.cholesky(np.atleast_2d(np.asarray(cov, dtype=float)), lower=True)
        return True
    except linalg.LinAlgError:
        return False


def whitened_project_sample(x: np.ndarray, cov: np.ndarray, A: np.ndarray) -> np.ndarray:
    """cov^{1/2} (I - P_B) cov^{-1/2} x, the cov-metric projection onto {A^T y = 0}"""
    projector = WhitenedProjector(cov, A, jitter=0.0 if _is_well_posed(cov) else None)
    return projector.project(x)


def constraint_matrix(cs: ConstraintSet, n_design: int, weighting: str = "quadrature") -> np.ndarray:
    """
    Columns a_j of the stacked constraint A^T b = 0 over [design; nodes].

    "quadrature" puts w_i g_jk(node_i) on the node entries so that a_j^T b is
    the quadrature value of <g_j, b>; "design" puts g_jk(x_i) on the design
    entries instead.
    """
    if weighting not in WEIGHTINGS:
        raise ConfigurationError(f"Unknown constraint weighting {weighting!r}")
    rule = cs.rule
    total = n_design + rule.n_nodes
    A = np.zeros((cs.q * total, cs.p))
    grads = cs.grid_values()
    for k in range(cs.q):
        offset = k * total
        if weighting == "quadrature":
            A[offset + n_design: offset + total] = (rule.weights[:, None] * grads[:, :, k].T)
        else:
            if cs.design_gradients is None or cs.design_gradients.shape[1] != n_design:
                raise ContractViolationError("Design weighting needs gradients at the design points")
            A[offset: offset + n_design] = cs.design_gradients[:, :, k].T
    return A


@dataclass
class MomentProjection:
    """Result of one moment projection: the projected draw and the fitted moments"""

    draw: BiasDraw
    report: ProjectionReport
    sample_mean: np.ndarray = field(repr=False)
    sample_cov: np.ndarray = field(repr=False)


def moment_project_nongaussian(prior: BiasPrior, residuals: np.ndarray, noise: NoiseModel,
                               design: Design, cs: ConstraintSet, M: int, seed: SeedLike = None,
                               weighting: str = "quadrature") -> MomentProjection:
    """
    Moment projection for priors without a closed-form conditional.

    Draws M conditional samples over [design; nodes], forms their mean beta
    and covariance Phi (plus a ridge of 1e-8 * trace / D), and maps a fresh
    conditional draw through Phi^{1/2} (I - P) Phi^{-1/2}.
    """
    rng = as_generator(seed)
    rule = cs.rule
    dim = cs.q * (design.n + rule.n_nodes)
    if M < MOMENT_SAMPLES_PER_DIMENSION * dim:
        raise ConfigurationError(
            f"Moment projection needs M >= {MOMENT_SAMPLES_PER_DIMENSION * dim} samples "
            f"for a {dim}-dimensional bias vector, got {M}"
        )
    samples = prior.sample_stacked(residuals, noise, design, rule, M, rng)
    beta = samples.mean(axis=0)
    phi = np.cov(samples, rowvar=False)
    phi = 0.5 * (phi + phi.T)
    phi += MOMENT_RIDGE * max(np.trace(phi), 1e-300) / dim * np.eye(dim)

    A = constraint_matrix(cs, design.n, weighting)
    projector = WhitenedProjector(phi, A, jitter=0.0)
    fresh = prior.conditional_draw(residuals, noise, design, rule, rng)
    original = fresh.stacked()
    projected = projector.project(original)
    draw = BiasDraw.from_stacked(projected, design.n, rule, cs.q, provenance="projected")
    return MomentProjection(draw, projector.report(original, projected), beta, phi)
