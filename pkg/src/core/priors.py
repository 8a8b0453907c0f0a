"""
Bias-function priors and their conditional samplers.

A prior draws the bias jointly at the design points and at the quadrature
nodes. Joint vectors are stacked outcome-major: entry k * (n + N) + i holds
outcome k at the i-th point of [design; nodes].
"""

import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline
from scipy.spatial.distance import cdist

from .errors import (
    ConfigurationError,
    DimensionError,
    IllConditionedBasisWarning,
    RankDeficiencyWarning,
)
from .models import ConstraintSet, Design, NoiseModel
from .numerics import (
    Box,
    GridFunction,
    QuadratureRule,
    SeedLike,
    as_generator,
    cholesky_factor,
    condition_number,
    spd_pseudo_inverse,
)

PROVENANCES = ("raw", "projected")
BASIS_CONDITION_LIMIT = 1e12
BASIS_RIDGE = 1e-8


def stack_values(design_values: np.ndarray, grid_values: np.ndarray) -> np.ndarray:
    """(n, q) and (N, q) arrays to the outcome-major q(n + N) vector"""
    return np.vstack([design_values, grid_values]).T.ravel()


def unstack_values(vector: np.ndarray, n: int, q: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of stack_values: returns ((n, q), (N, q))"""
    matrix = np.asarray(vector, dtype=float).reshape(q, -1).T
    return matrix[:n], matrix[n:]


@dataclass(frozen=True, eq=False)
class BiasDraw:
    """One realization of the bias at the design points and on the quadrature grid"""

    design_values: np.ndarray
    grid_values: GridFunction
    provenance: str = "raw"
    coefficients: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ConfigurationError(f"Unknown provenance {self.provenance!r}")
        design_values = np.asarray(self.design_values, dtype=float)
        if design_values.ndim == 1:
            design_values = design_values[:, None]
        if design_values.shape[1] != self.grid_values.q:
            raise DimensionError("Design and grid values disagree in output dimension")
        if not np.all(np.isfinite(design_values)):
            raise DimensionError("Bias values must be finite")
        object.__setattr__(self, "design_values", design_values)

    @property
    def n(self) -> int:
        return self.design_values.shape[0]

    @property
    def q(self) -> int:
        return self.grid_values.q

    @property
    def rule(self) -> QuadratureRule:
        return self.grid_values.rule

    def stacked(self) -> np.ndarray:
        return stack_values(self.design_values, self.grid_values.values)

    @classmethod
    def from_stacked(cls, vector: np.ndarray, n: int, rule: QuadratureRule, q: int,
                     provenance: str = "raw") -> "BiasDraw":
        design_values, grid_values = unstack_values(vector, n, q)
        return cls(design_values, GridFunction(grid_values, rule), provenance)


class BiasPrior(ABC):
    """
    Interface every bias prior implements.

    conditional_draw samples b | theta, y given the residuals
    y_F(x_i) - f(x_i, theta); evaluate reads a draw at arbitrary points.
    """

    is_gaussian_conditional: bool = False
    name: str = "prior"

    @abstractmethod
    def conditional_draw(self, residuals: np.ndarray, noise: NoiseModel, design: Design,
                         rule: QuadratureRule, seed: SeedLike = None) -> BiasDraw:
        ...

    @abstractmethod
    def evaluate(self, draw: BiasDraw, points: np.ndarray) -> np.ndarray:
        ...

    def sample_stacked(self, residuals: np.ndarray, noise: NoiseModel, design: Design,
                       rule: QuadratureRule, size: int, seed: SeedLike = None) -> np.ndarray:
        """size independent conditional draws as rows of stacked vectors"""
        rng = as_generator(seed)
        return np.stack([
            self.conditional_draw(residuals, noise, design, rule, rng).stacked()
            for _ in range(int(size))
        ])

    def describe(self) -> Dict:
        return {"prior": self.name}


@dataclass(frozen=True)
class MaternKernel:
    """C(x, x') = sigma2 (1 + r / psi) exp(-r / psi), r = |x - x'|"""

    sigma2: float = 1.0
    psi: float = 0.5

    def __post_init__(self):
        if not self.sigma2 > 0 or not self.psi > 0:
            raise ConfigurationError(f"Kernel needs sigma2 > 0 and psi > 0, got {self}")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        a = a[:, None] if a.ndim == 1 else a
        b = b[:, None] if b.ndim == 1 else b
        r = cdist(a, b) / self.psi
        return self.sigma2 * (1.0 + r) * np.exp(-r)


@dataclass
class ConditionalOperator:
    """Joint Gaussian conditional over [design; nodes] for a fixed design, rule and noise"""

    mean_map: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray

    def mean(self, residuals: np.ndarray) -> np.ndarray:
        return self.mean_map @ np.asarray(residuals, dtype=float).T.ravel()


class GaussianConditionalPrior(BiasPrior):
    """
    Priors whose stacked covariance is available in closed form, so that
    b | theta, y is Gaussian jointly over the design and the quadrature nodes.
    """

    is_gaussian_conditional = True

    def __init__(self, q: int = 1):
        self.q = int(q)
        self._cache: Optional[Tuple] = None

    @abstractmethod
    def prior_covariance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Stacked (q * len(a), q * len(b)) prior covariance"""

    def conditional_operator(self, design: Design, rule: QuadratureRule,
                             noise: NoiseModel) -> ConditionalOperator:
        sigma_bytes = noise.sigma_F.tobytes()
        if self._cache is not None:
            c_design, c_rule, c_sigma, operator = self._cache
            if c_design is design and c_rule is rule and c_sigma == sigma_bytes:
                return operator
        if noise.q != self.q:
            raise DimensionError(f"Noise model has q={noise.q}, prior expects q={self.q}")

        n = design.n
        points = np.vstack([design.points, rule.nodes])
        total = points.shape[0]
        prior = self.prior_covariance(points, points)
        observed = np.concatenate([k * total + np.arange(n) for k in range(self.q)])
        cross = prior[:, observed]
        innovation = prior[np.ix_(observed, observed)] + np.kron(noise.sigma_F, np.eye(n))
        factor = cholesky_factor(innovation, jitter=1e-12 * max(np.trace(innovation), 1.0))
        mean_map = linalg.cho_solve((factor, True), cross.T).T
        covariance = prior - mean_map @ cross.T
        covariance = 0.5 * (covariance + covariance.T)
        operator = ConditionalOperator(mean_map, covariance, cholesky_factor(covariance))
        self._cache = (design, rule, sigma_bytes, operator)
        return operator

    def conditional_moments(self, residuals: np.ndarray, noise: NoiseModel, design: Design,
                            rule: QuadratureRule) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the stacked conditional"""
        operator = self.conditional_operator(design, rule, noise)
        return operator.mean(residuals), operator.covariance

    def conditional_draw(self, residuals: np.ndarray, noise: NoiseModel, design: Design,
                         rule: QuadratureRule, seed: SeedLike = None) -> BiasDraw:
        operator = self.conditional_operator(design, rule, noise)
        rng = as_generator(seed)
        vector = operator.mean(residuals) + operator.chol @ rng.standard_normal(operator.chol.shape[0])
        return BiasDraw.from_stacked(vector, design.n, rule, self.q)

    def sample_stacked(self, residuals: np.ndarray, noise: NoiseModel, design: Design,
                       rule: QuadratureRule, size: int, seed: SeedLike = None) -> np.ndarray:
        operator = self.conditional_operator(design, rule, noise)
        rng = as_generator(seed)
        z = rng.standard_normal((operator.chol.shape[0], int(size)))
        return (operator.mean(residuals)[:, None] + operator.chol @ z).T

    def evaluate(self, draw: BiasDraw, points: np.ndarray) -> np.ndarray:
        """Prior-conditional mean of b at points given its values on the quadrature nodes"""
        points = np.asarray(points, dtype=float)
        points = points[:, None] if points.ndim == 1 else points
        nodes = draw.rule.nodes
        factor = cholesky_factor(self.prior_covariance(nodes, nodes))
        weights = linalg.cho_solve((factor, True), draw.grid_values.values.T.ravel())
        values = self.prior_covariance(points, nodes) @ weights
        return values.reshape(self.q, -1).T


class GaussianProcessPrior(GaussianConditionalPrior):
    """Independent zero-mean GP per outcome with a shared Matérn kernel"""

    name = "gp"

    def __init__(self, kernel: MaternKernel, q: int = 1):
        super().__init__(q)
        self.kernel = kernel

    def prior_covariance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.kron(np.eye(self.q), self.kernel(a, b))

    def describe(self) -> Dict:
        return {"prior": self.name, "sigma2": self.kernel.sigma2, "psi": self.kernel.psi}


def gp_conditional_draw(kernel: MaternKernel, residuals: np.ndarray, noise: NoiseModel,
                        rule: QuadratureRule, design: Design, seed: SeedLike = None) -> BiasDraw:
    """One draw of b | theta, y under independent GP(0, kernel) priors per outcome"""
    residuals = np.asarray(residuals, dtype=float).reshape(design.n, -1)
    prior = GaussianProcessPrior(kernel, q=residuals.shape[1])
    return prior.conditional_draw(residuals, noise, design, rule, seed)


class OrthogonalKernel:
    """
    C_theta(x, x') = C(x, x') - h(x)^T H^+ h(x') with
    h_j(x) = sum_k int g_jk(u) C(x, u) du and
    H_jj' = sum_k int int g_jk(u) C(u, u') g_j'k(u') du du'.

    For q outcomes the kernel couples them: block (k, l) of the stacked
    covariance is delta_kl C - h_k^T H^+ h_l.
    """

    def __init__(self, base: MaternKernel, constraints: ConstraintSet, rule: QuadratureRule):
        if not rule.same_as(constraints.rule):
            raise DimensionError("OGP kernel rule differs from the constraint set's rule")
        self.base = base
        self.rule = rule
        self.q = constraints.q
        self._weighted = rule.weights[None, :, None] * constraints.grid_values()
        node_cov = base(rule.nodes, rule.nodes)
        self.H = sum(self._weighted[:, :, k] @ node_cov @ self._weighted[:, :, k].T
                     for k in range(self.q))
        self.H = 0.5 * (self.H + self.H.T)
        self.H_inv, deficient = spd_pseudo_inverse(self.H)
        if deficient:
            warnings.warn("OGP matrix H is numerically singular; using pseudo-inverse",
                          RankDeficiencyWarning, stacklevel=2)

    def h(self, points: np.ndarray) -> np.ndarray:
        """(q, M, p) array of h_k(x) at the given points"""
        cov = self.base(points, self.rule.nodes)
        return np.stack([cov @ self._weighted[:, :, k].T for k in range(self.q)])

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        a = a[:, None] if a.ndim == 1 else a
        b = b[:, None] if b.ndim == 1 else b
        base = self.base(a, b)
        h_a, h_b = self.h(a), self.h(b)
        blocks = [[(base if k == l else 0.0) - h_a[k] @ self.H_inv @ h_b[l].T
                   for l in range(self.q)] for k in range(self.q)]
        return np.block(blocks)


def ogp_kernel(base: MaternKernel, constraints: ConstraintSet,
               rule: QuadratureRule) -> OrthogonalKernel:
    return OrthogonalKernel(base, constraints, rule)


class OrthogonalGaussianProcessPrior(GaussianConditionalPrior):
    """GP prior whose covariance enforces the orthogonality constraints a priori"""

    name = "ogp"

    def __init__(self, kernel: OrthogonalKernel):
        super().__init__(kernel.q)
        self.kernel = kernel

    def prior_covariance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.kernel(a, b)

    def describe(self) -> Dict:
        return {"prior": self.name, "sigma2": self.kernel.base.sigma2, "psi": self.kernel.base.psi}


class BasisExpansionPrior(BiasPrior):
    """
    b_k(x) = sum_j c_jk B_j(x) with cubic B-splines on clamped uniform knots
    and c ~ N(0, tau2 I). One-dimensional inputs only.
    """

    name = "basis"

    def __init__(self, n_basis: int = 12, tau2: float = 1.0, domain: Optional[Box] = None):
        domain = domain or Box.unit(1)
        if domain.dim != 1:
            raise ConfigurationError("Spline basis prior supports one-dimensional inputs only")
        if n_basis < 4:
            raise ConfigurationError(f"Cubic spline basis needs at least 4 functions, got {n_basis}")
        if not tau2 > 0:
            raise ConfigurationError(f"tau2 must be positive, got {tau2}")
        self.n_basis = int(n_basis)
        self.tau2 = float(tau2)
        self.domain = domain
        lo, hi = float(domain.lower[0]), float(domain.upper[0])
        self.knots = np.concatenate([[lo] * 3, np.linspace(lo, hi, self.n_basis - 2), [hi] * 3])
        self._cache: Optional[Tuple] = None

    def basis_matrix(self, points: np.ndarray) -> np.ndarray:
        x = np.clip(np.asarray(points, dtype=float).reshape(-1),
                    self.domain.lower[0], self.domain.upper[0])
        return BSpline.design_matrix(x, self.knots, 3).toarray()

    def _matrices(self, design: Design, rule: QuadratureRule):
        if self._cache is not None and self._cache[0] is design and self._cache[1] is rule:
            return self._cache[2], self._cache[3]
        phi_design = self.basis_matrix(design.points)
        phi_nodes = self.basis_matrix(rule.nodes)
        self._cache = (design, rule, phi_design, phi_nodes)
        return phi_design, phi_nodes

    def coefficient_posterior(self, residuals: np.ndarray, noise: NoiseModel,
                              design: Design) -> Tuple[np.ndarray, np.ndarray]:
        """
        Conjugate posterior of the coefficients.

        Returns:
            (mean, cov) with mean of shape (K, q) and cov the (qK, qK)
            covariance of the outcome-major coefficient vector
        """
        residuals = np.asarray(residuals, dtype=float).reshape(design.n, -1)
        q = residuals.shape[1]
        if noise.q != q:
            raise DimensionError(f"Noise model has q={noise.q}, residuals have {q} columns")
        phi = self.basis_matrix(design.points)
        noise_precision = noise.precision()
        precision = np.kron(noise_precision, phi.T @ phi) + np.eye(q * self.n_basis) / self.tau2
        if condition_number(precision) > BASIS_CONDITION_LIMIT:
            warnings.warn("Spline basis posterior precision is ill-conditioned; adding ridge",
                          IllConditionedBasisWarning, stacklevel=2)
            precision += BASIS_RIDGE * np.trace(precision) / precision.shape[0] * np.eye(precision.shape[0])
        rhs = np.kron(noise_precision, phi.T) @ residuals.T.ravel()
        factor = linalg.cho_factor(precision, lower=True)
        mean = linalg.cho_solve(factor, rhs)
        cov = linalg.cho_solve(factor, np.eye(precision.shape[0]))
        return mean.reshape(q, self.n_basis).T, 0.5 * (cov + cov.T)

    def _draw_coefficients(self, residuals, noise, design, size, rng) -> np.ndarray:
        mean, cov = self.coefficient_posterior(residuals, noise, design)
        chol = cholesky_factor(cov)
        z = rng.standard_normal((cov.shape[0], size))
        return mean.T.ravel()[:, None] + chol @ z

    def conditional_draw(self, residuals: np.ndarray, noise: NoiseModel, design: Design,
                         rule: QuadratureRule, seed: SeedLike = None) -> BiasDraw:
        rng = as_generator(seed)
        phi_design, phi_nodes = self._matrices(design, rule)
        flat = self._draw_coefficients(residuals, noise, design, 1, rng)[:, 0]
        coefficients = flat.reshape(-1, self.n_basis).T
        return BiasDraw(phi_design @ coefficients, GridFunction(phi_nodes @ coefficients, rule),
                        coefficients=coefficients)

    def sample_stacked(self, residuals: np.ndarray, noise: NoiseModel, design: Design,
                       rule: QuadratureRule, size: int, seed: SeedLike = None) -> np.ndarray:
        rng = as_generator(seed)
        phi_design, phi_nodes = self._matrices(design, rule)
        phi_union = np.vstack([phi_design, phi_nodes])
        flat = self._draw_coefficients(residuals, noise, design, int(size), rng)
        q = flat.shape[0] // self.n_basis
        blocks = [phi_union @ flat[k * self.n_basis:(k + 1) * self.n_basis] for k in range(q)]
        return np.vstack(blocks).T

    def evaluate(self, draw: BiasDraw, points: np.ndarray) -> np.ndarray:
        if draw.coefficients is None:
            raise ConfigurationError("Draw carries no spline coefficients")
        return self.basis_matrix(points) @ draw.coefficients

    def describe(self) -> Dict:
        return {"prior": self.name, "n_basis": self.n_basis, "tau2": self.tau2}


def basis_conditional_draw(prior: BasisExpansionPrior, residuals: np.ndarray, noise: NoiseModel,
                           rule: QuadratureRule, design: Design, seed: SeedLike = None) -> BiasDraw:
    return prior.conditional_draw(residuals, noise, design, rule, seed)
