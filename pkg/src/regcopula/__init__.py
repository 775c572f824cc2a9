"""Distributional regression with implicit Gaussian regression copulas."""

from .bases import (
    DesignMatrices,
    KnotGrid,
    build_bspline_design,
    build_rbf_design,
    evaluate_basis,
    make_design,
    sample_knots_stratified,
)
from .copula import (
    CopulaState,
    NormalizationCache,
    PosteriorDraws,
    conditional_loglik,
    correlation_matrix,
    gaussian_copula_logdensity,
    log_posterior_and_grad,
    log_target_alpha_and_grad,
    make_logh,
    normalization,
    state_to_theta,
    theta_to_state,
)
from .errors import (
    ConfigurationError,
    DataError,
    ExtrapolationError,
    NumericalError,
    RegCopulaError,
)
from .margins import (
    MarginModel,
    PreTransform,
    fit_kde_margin,
    from_copula_scale,
    margin_log_jacobian,
    to_copula_scale,
)
from .priors import Ar2Hyper, HorseshoeHyper, PrecisionFactor

__version__ = "0.1.0"
