"""Causal effects on dependently censored survival times.

A control-function / instrumental-variable estimator for the effect of a
confounded regressor on a right-censored log survival time, where the
censoring time may depend on the survival time through correlated Gaussian
errors.  Ships a two-step maximum-likelihood fit with first-stage-corrected
sandwich standard errors, benchmark estimators, a Monte Carlo harness and a
CLI.
"""

__version__ = "0.1.0"

from .estimation import (
    EstimationError,
    FirstStageFit,
    FitResult,
    confidence_intervals,
    fit_first_stage,
    fit_independent,
    fit_naive,
    fit_oracle,
    fit_two_step,
    sandwich_covariance,
)
from .model import (
    FirstStageFamily,
    Observation,
    ObservationSet,
    ThetaParams,
    conditional_cdf_Y,
    control_function,
    log_likelihood,
    log_subdensity,
    residuals,
)
from .numerics import (
    DiffConfig,
    MinimizeResult,
    NonFiniteObjectiveError,
    OptimConfig,
    SingularMatrixError,
    binorm_cdf,
    invert,
    log_norm_cdf,
    minimize,
    norm_cdf,
    norm_pdf,
    richardson_gradient,
    richardson_hessian,
    richardson_jacobian,
    solve,
)
from .simulation import (
    SimulationDesign,
    SimulationSummary,
    default_theta_true,
    generate_dataset,
    run_monte_carlo,
    summary_table,
)

__all__ = [
    "__version__",
    "DiffConfig", "OptimConfig", "MinimizeResult",
    "NonFiniteObjectiveError", "SingularMatrixError",
    "norm_pdf", "norm_cdf", "log_norm_cdf", "binorm_cdf",
    "richardson_gradient", "richardson_jacobian", "richardson_hessian",
    "minimize", "invert", "solve",
    "FirstStageFamily", "Observation", "ObservationSet", "ThetaParams",
    "control_function", "residuals", "log_subdensity", "log_likelihood",
    "conditional_cdf_Y",
    "EstimationError", "FirstStageFit", "FitResult",
    "fit_first_stage", "fit_two_step", "fit_naive", "fit_independent",
    "fit_oracle", "sandwich_covariance", "confidence_intervals",
    "SimulationDesign", "SimulationSummary", "default_theta_true",
    "generate_dataset", "run_monte_carlo", "summary_table",
]
