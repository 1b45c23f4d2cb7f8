"""Robust estimation for partially linear additive models.

B-spline approximations of the additive components combined with
MM-estimation of the linear part, robust BIC selection of the basis
dimension, covariance estimates for the linear coefficients and a Monte
Carlo harness.
"""
from .exceptions import (AllRejectedError, DatasetError, DatasetSchemaError, NumericalError,
                         RankDeficientError, RobplamError, SingularMatrixError, SubsampleError)
from .plam import PlamFit, PlamSpec, fit, flag_outliers, predict, rbic

__version__ = "0.1.0"

__all__ = [
    "PlamFit", "PlamSpec", "fit", "predict", "rbic", "flag_outliers",
    "RobplamError", "DatasetError", "DatasetSchemaError", "NumericalError",
    "RankDeficientError", "SubsampleError", "AllRejectedError", "SingularMatrixError",
]
