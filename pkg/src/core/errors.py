"""
Exceptions and warning categories shared by the core modules
"""


class OrthocalError(Exception):
    """Base class for every error raised by OrthoCal"""


class ConfigurationError(OrthocalError, ValueError):
    """Invalid domain, config value, or unsupported option combination"""


class DimensionError(OrthocalError, ValueError):
    """Arrays or grid functions whose shapes do not line up"""


class ContractViolationError(OrthocalError):
    """An input breaks a documented precondition (e.g. non-symmetric matrix)"""


class NumericalError(OrthocalError):
    """Factorization or likelihood evaluation failed"""


class ModelEvaluationError(OrthocalError):
    """The computer model raised or returned non-finite output"""


class FitError(OrthocalError):
    """Surrogate could not be fitted"""


class EstimationError(OrthocalError):
    """Plug-in noise estimation could not be carried out"""


class OptimizationError(OrthocalError):
    """No optimizer start converged"""


class ExperimentError(OrthocalError):
    """Too many replications failed"""


class OrthocalWarning(UserWarning):
    """Base class for recoverable numerical conditions"""


class RankDeficiencyWarning(OrthocalWarning):
    """A Gram or covariance matrix was numerically singular; pseudo-inverse used"""


class ExtrapolationWarning(OrthocalWarning):
    """Surrogate evaluated outside the hull of its training runs"""


class AcceptanceRateWarning(OrthocalWarning):
    """Post burn-in Metropolis acceptance rate outside [0.05, 0.7]"""


class IllConditionedBasisWarning(OrthocalWarning):
    """Spline basis Gram matrix ill-conditioned; ridge added"""


class IntervalWarning(OrthocalWarning):
    """Posterior mean falls outside its credible interval"""
