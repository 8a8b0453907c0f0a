"""
Quadrature, L2 inner products and small dense linear algebra.

Every other core module integrates over the input domain and solves small
symmetric systems through the helpers in this file, so the conventions live
here: inner products are unnormalized sums of weighted products, rank
deficiency is reported with a RankDeficiencyWarning and handled by a
pseudo-inverse, and Cholesky factorizations escalate a diagonal jitter before
giving up.
"""

import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, special

from .errors import (
    ConfigurationError,
    ContractViolationError,
    DimensionError,
    NumericalError,
    RankDeficiencyWarning,
)

# Smallest-to-largest eigenvalue ratio below which a symmetric matrix is
# treated as singular (equivalently a condition number of 1e12).
RANK_RTOL = 1e-12
DEFAULT_POINTS_PER_AXIS = 32
JITTER_ESCALATIONS = 3

SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Turn a seed, SeedSequence or Generator into a Generator"""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box [a_1, b_1] x ... x [a_d, b_d]"""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ConfigurationError(
                f"Box bounds must be matching vectors, got {lower.shape} and {upper.shape}"
            )
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ConfigurationError("Box bounds must be finite")
        if np.any(lower >= upper):
            raise ConfigurationError(f"Box needs lower < upper on every axis: {lower} vs {upper}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def from_bounds(cls, bounds: Sequence[Tuple[float, float]]) -> "Box":
        bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        return cls(bounds[:, 0], bounds[:, 1])

    @classmethod
    def unit(cls, dim: int = 1) -> "Box":
        return cls(np.zeros(dim), np.ones(dim))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def centre(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> bool:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        slack = tol * self.widths
        return bool(
            np.all(points >= self.lower - slack) and np.all(points <= self.upper + slack)
        )

    def clip(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.lower, self.upper)

    def scale_unit(self, unit_points: np.ndarray) -> np.ndarray:
        """Map points of [0, 1]^d into the box"""
        return self.lower + np.asarray(unit_points) * self.widths

    def same_as(self, other: "Box") -> bool:
        return (
            self is other
            or (np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper))
        )

    def to_dict(self) -> Dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Tensor-product quadrature rule on a box"""

    nodes: np.ndarray
    weights: np.ndarray
    domain: Box
    points_per_axis: int

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape[0] != weights.size:
            raise DimensionError("Quadrature nodes and weights disagree in length")
        if np.any(weights <= 0):
            raise ConfigurationError("Quadrature weights must be strictly positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def n_nodes(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def integrate(self, values: np.ndarray) -> Union[float, np.ndarray]:
        """Integrate samples on the nodes; (N,) gives a float, (N, q) a q-vector"""
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.n_nodes:
            raise DimensionError(
                f"Expected {self.n_nodes} node values, got {values.shape[0]}"
            )
        result = np.tensordot(self.weights, values, axes=(0, 0))
        return float(result) if np.ndim(result) == 0 else result

    def same_as(self, other: "QuadratureRule") -> bool:
        if self is other:
            return True
        return (
            self.nodes.shape == other.nodes.shape
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.weights, other.weights)
        )


@dataclass(frozen=True, eq=False)
class GridFunction:
    """A q-variate function sampled on the nodes of a quadrature rule"""

    values: np.ndarray
    rule: QuadratureRule = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.rule.n_nodes:
            raise DimensionError(
                f"GridFunction has {values.shape[0]} rows but the rule has {self.rule.n_nodes} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise NumericalError("GridFunction values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_callable(cls, func, rule: QuadratureRule) -> "GridFunction":
        return cls(np.asarray(func(rule.nodes), dtype=float), rule)

    @property
    def q(self) -> int:
        return self.values.shape[1]

    def norm(self) -> float:
        return float(np.sqrt(max(inner_product(self, self), 0.0)))

    def _combine(self, other: "GridFunction", sign: float) -> "GridFunction":
        _check_compatible(self, other)
        return GridFunction(self.values + sign * other.values, self.rule)

    def __add__(self, other: "GridFunction") -> "GridFunction":
        return self._combine(other, 1.0)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        return self._combine(other, -1.0)

    def __mul__(self, scalar: float) -> "GridFunction":
        return GridFunction(float(scalar) * self.values, self.rule)

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return GridFunction(-self.values, self.rule)


def gauss_legendre_rule(points_per_axis: int = DEFAULT_POINTS_PER_AXIS,
                        domain: Optional[Box] = None) -> QuadratureRule:
    """
    Tensor Gauss-Legendre rule on an axis-aligned box.

    Args:
        points_per_axis: Nodes per axis (>= 2); exact for per-axis degree
                         up to 2 * points_per_axis - 1
        domain: Integration box, default [0, 1]

    Returns:
        QuadratureRule whose weights sum to the box volume
    """
    if domain is None:
        domain = Box.unit(1)
    if int(points_per_axis) != points_per_axis or points_per_axis < 2:
        raise ConfigurationError(f"points_per_axis must be an integer >= 2, got {points_per_axis}")
    points_per_axis = int(points_per_axis)

    ref_nodes, ref_weights = special.roots_legendre(points_per_axis)

    axis_nodes = []
    axis_weights = []
    for a, b in zip(domain.lower, domain.upper):
        half = 0.5 * (b - a)
        axis_nodes.append(a + half * (ref_nodes + 1.0))
        axis_weights.append(half * ref_weights)

    # first axis varies slowest
    grids = np.meshgrid(*axis_nodes, indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    weight_grids = np.meshgrid(*axis_weights, indexing="ij")
    weights = np.prod(np.column_stack([w.ravel() for w in weight_grids]), axis=1)

    return QuadratureRule(nodes=nodes, weights=weights, domain=domain,
                          points_per_axis=points_per_axis)


def _check_compatible(f: GridFunction, g: GridFunction):
    if not f.rule.same_as(g.rule):
        raise DimensionError("Grid functions live on different quadrature rules")
    if f.q != g.q:
        raise DimensionError(f"Grid functions have different output dimension ({f.q} vs {g.q})")


def inner_product(f: GridFunction, g: GridFunction) -> float:
    """<f, g> = sum_k int f_k g_k dx, by quadrature"""
    _check_compatible(f, g)
    return float(np.sum(f.rule.weights[:, None] * f.values * g.values))


def _as_symmetric(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {matrix.shape}")
    scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-10 * scale):
        raise ContractViolationError(f"{name} must be symmetric")
    return 0.5 * (matrix + matrix.T)


def spd_pseudo_inverse(matrix: np.ndarray, rtol: float = RANK_RTOL) -> Tuple[np.ndarray, bool]:
    """
    Pseudo-inverse of a symmetric PSD matrix by eigendecomposition.

    Returns:
        (pseudo-inverse, rank_deficient) where rank_deficient is True when any
        eigenvalue was at or below rtol times the largest
    """
    matrix = _as_symmetric(matrix)
    eigvals, eigvecs = np.linalg.eigh(matrix)
    top = eigvals.max()
    if top <= 0:
        return np.zeros_like(matrix), True
    keep = eigvals > rtol * top
    inv = (eigvecs[:, keep] / eigvals[keep]) @ eigvecs[:, keep].T
    return inv, bool(not np.all(keep))


def condition_number(matrix: np.ndarray) -> float:
    """Ratio of extreme eigenvalues of a symmetric matrix (inf when singular)"""
    eigvals = np.linalg.eigvalsh(_as_symmetric(matrix))
    if eigvals.min() <= 0:
        return float("inf")
    return float(eigvals.max() / eigvals.min())


def solve_spd(Q: np.ndarray, rhs: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    """
    Solve Q x = rhs for symmetric positive (semi-)definite Q.

    Well-conditioned systems go through a Cholesky solve. When the smallest
    eigenvalue is at or below rtol times the largest, a RankDeficiencyWarning
    is emitted and the minimum-norm pseudo-inverse solution is returned.
    """
    Q = _as_symmetric(Q, "Q")
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != Q.shape[0]:
        raise DimensionError(f"rhs has {rhs.shape[0]} rows, Q is {Q.shape[0]}x{Q.shape[0]}")

    eigvals = np.linalg.eigvalsh(Q)
    top = eigvals.max()
    if top <= 0 or eigvals.min() <= rtol * top:
        warnings.warn(
            f"Symmetric system is numerically singular (eigenvalues {eigvals.min():.3g} .. "
            f"{top:.3g}); using pseudo-inverse",
            RankDeficiencyWarning,
            stacklevel=2,
        )
        pinv, _ = spd_pseudo_inverse(Q, rtol)
        return pinv @ rhs

    return linalg.cho_solve(linalg.cho_factor(Q, lower=True), rhs)


def default_jitter(cov: np.ndarray) -> float:
    n = cov.shape[0]
    trace = float(np.trace(cov))
    return 1e-8 * trace / n if trace > 0 else 1e-8


def cholesky_factor(cov: np.ndarray, jitter: Optional[float] = None) -> np.ndarray:
    """
    Lower Cholesky factor of cov + jitter * I.

    The jitter (default 1e-8 * trace / n) is escalated by a factor of ten up to
    three times before a NumericalError is raised.
    """
    cov = _as_symmetric(cov, "cov")
    n = cov.shape[0]
    jitter = default_jitter(cov) if jitter is None else float(jitter)

    for _ in range(JITTER_ESCALATIONS + 1):
        try:
            return linalg.cholesky(cov + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter = jitter * 10.0 if jitter > 0 else default_jitter(cov)

    raise NumericalError(
        f"Cholesky factorization failed after {JITTER_ESCALATIONS} jitter escalations "
        f"(final jitter {jitter / 10.0:.3g})"
    )


def cholesky_sample(mean: np.ndarray, cov: np.ndarray, noise_seed: SeedLike = None,
                    jitter: Optional[float] = None, size: Optional[int] = None) -> np.ndarray:
    """
    Draw from N(mean, cov + jitter * I).

    Args:
        mean: n-vector
        cov: n x n symmetric covariance
        noise_seed: seed or Generator; the same seed gives the same draw
        jitter: diagonal regularization, default 1e-8 * trace / n
        size: number of draws; None returns a single n-vector

    Returns:
        (n,) array, or (size, n) when size is given
    """
    mean = np.asarray(mean, dtype=float)
    chol = cholesky_factor(cov, jitter)
    if chol.shape[0] != mean.size:
        raise DimensionError(f"mean has {mean.size} entries, cov is {chol.shape[0]}x{chol.shape[0]}")
    rng = as_generator(noise_seed)
    if size is None:
        return mean + chol @ rng.standard_normal(mean.size)
    z = rng.standard_normal((mean.size, int(size)))
    return (mean[:, None] + chol @ z).T


def spd_power(matrix: np.ndarray, power: float) -> np.ndarray:
    """Symmetric matrix power (e.g. 0.5 or -0.5) of an SPD matrix"""
    matrix = _as_symmetric(matrix)
    eigvals, eigvecs = np.linalg.eigh(matrix)
    if eigvals.min() <= 0:
        raise NumericalError("Matrix power needs a positive definite matrix")
    return (eigvecs * eigvals ** power) @ eigvecs.T
