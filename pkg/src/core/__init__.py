"""Core functionality for OrthoCal"""

from .calibrate import (
    AdaptiveMetropolis,
    CalibrationResult,
    CalibrationSettings,
    Chain,
    CoverageTable,
    PosteriorSummary,
    ReplicationOutcome,
    ThetaPrior,
    calibrate,
    coverage_experiment,
    emit_loss_profile,
    estimate_anchor,
    l2_loss,
    population_minimizer,
    run_projection_sampler,
    summarize_chain,
)
from .emulator import (
    NadarayaWatsonSmoother,
    RunTable,
    Surrogate,
    estimate_noise_covariance,
    fit_surrogate,
    surrogate_as_model,
)
from .errors import (
    OrthocalError,
    ConfigurationError,
    DimensionError,
    ContractViolationError,
    NumericalError,
    ModelEvaluationError,
    FitError,
    EstimationError,
    OptimizationError,
    ExperimentError,
    OrthocalWarning,
    RankDeficiencyWarning,
    ExtrapolationWarning,
    AcceptanceRateWarning,
    IllConditionedBasisWarning,
    IntervalWarning,
)
from .experiment import (
    ExperimentConfig,
    ResultRecord,
    emit_density_data,
    generate_benchmark,
    run_experiment,
)
from .models import (
    ComputerModel,
    ConstraintSet,
    Design,
    FieldObservations,
    NoiseModel,
    build_constraint_set,
    gram_matrix,
    model_gradient,
)
from .numerics import Box, GridFunction, QuadratureRule, gauss_legendre_rule, inner_product
from .priors import (
    BasisExpansionPrior,
    BiasDraw,
    GaussianProcessPrior,
    MaternKernel,
    OrthogonalGaussianProcessPrior,
    basis_conditional_draw,
    gp_conditional_draw,
    ogp_kernel,
)
from .projection import (
    ProjectionReport,
    WhitenedProjector,
    finite_dim_project_gaussian,
    functional_project,
    moment_project_nongaussian,
    whitened_project_sample,
)
