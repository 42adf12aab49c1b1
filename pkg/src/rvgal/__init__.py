"""One-pass variational Gaussian inference for mixed models.

The package fits a Gaussian posterior approximation for generalized linear
mixed models in a single ordered sweep over the groups, using
importance-sampled derivative estimates of each group's marginal likelihood,
with an optional tempered schedule for the first groups. A quadrature-based
posterior and an adaptive Metropolis sampler ship alongside as an
independent reference for validating the approximation.
"""

from .models import (
    GroupData,
    ModelKind,
    Theta,
    ThetaLayout,
    alpha_prior_logpdf,
    conditional_loglik,
    joint_grad,
    joint_hessian,
    joint_loglik,
    lmm_exact_grad,
    lmm_exact_hessian,
    lmm_partial_loglik,
    sample_alpha_prior,
)
from .estimators import (
    EstimatorDegenerateError,
    GradHessEstimate,
    ImportanceProposal,
    WeightedAlphaSamples,
    batch_grad_hess,
    draw_weighted_alphas,
    fisher_gradient,
    grad_hess_estimate,
    louis_hessian,
)
from .recursion import (
    DerivMode,
    FitTrace,
    IterationRecord,
    PrecisionNotPositiveDefiniteError,
    RvgalConfig,
    SubstepRecord,
    VariationalState,
    default_prior,
    expected_grad_hess,
    rvgal_fit,
    rvgal_step,
    rvgal_tempered_step,
)
from .reference import (
    ComparisonReport,
    McmcOutput,
    QuadratureRule,
    compare_gaussian_vs_samples,
    full_log_posterior,
    gauss_hermite,
    gaussian_kl,
    make_log_posterior,
    quadrature_partial_loglik,
    rwm_sample,
    symmetric_gaussian_kl,
)
from .datasets import (
    Dataset,
    GenericSchema,
    StudyConfig,
    load_grouped_csv,
    reorder,
    simulate_lmm,
    simulate_logistic,
    write_grouped_csv,
)
from .studies import (
    OrderingStudyResult,
    SampleSizeStudyResult,
    run_ordering_study,
    run_sample_size_study,
)

__version__ = "0.1.0"

__all__ = [
    "ModelKind",
    "ThetaLayout",
    "Theta",
    "GroupData",
    "lmm_partial_loglik",
    "lmm_exact_grad",
    "lmm_exact_hessian",
    "conditional_loglik",
    "alpha_prior_logpdf",
    "joint_loglik",
    "joint_grad",
    "joint_hessian",
    "sample_alpha_prior",
    "EstimatorDegenerateError",
    "ImportanceProposal",
    "WeightedAlphaSamples",
    "GradHessEstimate",
    "draw_weighted_alphas",
    "fisher_gradient",
    "louis_hessian",
    "grad_hess_estimate",
    "batch_grad_hess",
    "DerivMode",
    "VariationalState",
    "RvgalConfig",
    "IterationRecord",
    "SubstepRecord",
    "FitTrace",
    "PrecisionNotPositiveDefiniteError",
    "default_prior",
    "expected_grad_hess",
    "rvgal_step",
    "rvgal_tempered_step",
    "rvgal_fit",
    "QuadratureRule",
    "gauss_hermite",
    "quadrature_partial_loglik",
    "full_log_posterior",
    "make_log_posterior",
    "McmcOutput",
    "rwm_sample",
    "gaussian_kl",
    "symmetric_gaussian_kl",
    "ComparisonReport",
    "compare_gaussian_vs_samples",
    "Dataset",
    "GenericSchema",
    "StudyConfig",
    "simulate_lmm",
    "simulate_logistic",
    "load_grouped_csv",
    "write_grouped_csv",
    "reorder",
    "OrderingStudyResult",
    "SampleSizeStudyResult",
    "run_ordering_study",
    "run_sample_size_study",
    "__version__",
]
