"""General Vecchia approximations for Gaussian-process prediction.

Typical use::

    from gvecchia import MaternParams, NoiseModel, build_geometry, predict

    geo = build_geometry(points, observed_mask, "maxmin")
    res = predict(geo, "rf-full", MaternParams(1.0, 0.1, 1.5), NoiseModel(0.1), z_o, m=20)
"""

from .conditioning import SCHEMES, ConditioningPlan, ConfigurationError, Scheme, build_plan, plan_statistics
from .covariance import MaternParams, NoiseModel, effective_range_to_rho, matern
from .geometry import GeometryModel, build_geometry, maxmin_order
from .likelihood import FitResult, fit_parameters, vecchia_loglik
from .oracle import GaussianDist, KLReport, exact_posterior, gaussian_kl, kl_report
from .prediction import (
    PredictionResult,
    conditional_sample,
    lincomb_distribution,
    posterior_mean,
    posterior_variances,
    predict,
    predict_response,
    predict_rf_stand_ponly,
)
from .sparse_engine import (
    NearDuplicateError,
    NumericalError,
    SparseTriangularFactor,
    build_U,
    derive_V,
    selected_inverse,
)

__version__ = "0.1.0"

__all__ = [
    "SCHEMES",
    "ConditioningPlan",
    "ConfigurationError",
    "FitResult",
    "GaussianDist",
    "GeometryModel",
    "KLReport",
    "MaternParams",
    "NearDuplicateError",
    "NoiseModel",
    "NumericalError",
    "PredictionResult",
    "Scheme",
    "SparseTriangularFactor",
    "build_U",
    "build_geometry",
    "build_plan",
    "conditional_sample",
    "derive_V",
    "effective_range_to_rho",
    "exact_posterior",
    "fit_parameters",
    "gaussian_kl",
    "kl_report",
    "lincomb_distribution",
    "matern",
    "maxmin_order",
    "plan_statistics",
    "posterior_mean",
    "posterior_variances",
    "predict",
    "predict_response",
    "predict_rf_stand_ponly",
    "selected_inverse",
    "vecchia_loglik",
]
