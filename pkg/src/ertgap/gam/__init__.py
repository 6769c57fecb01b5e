"""Penalized B-spline additive models."""

from .basis import basis_eval, make_knots, penalty_matrix
from .io import dumps, load_model, loads, save_model
from .model import (
    CONSTRAINTS,
    FAMILIES,
    FitInfo,
    FittedGAM,
    FittedSmooth,
    FittedTensor,
    SmoothSpec,
    TensorSpec,
    design_matrix,
    fit,
    fit_count,
    linear_predictor,
    partial_effect,
    predict_response,
    predict_skip,
    predict_trt_ms,
)

__all__ = [
    "CONSTRAINTS",
    "FAMILIES",
    "FitInfo",
    "FittedGAM",
    "FittedSmooth",
    "FittedTensor",
    "SmoothSpec",
    "TensorSpec",
    "basis_eval",
    "design_matrix",
    "dumps",
    "fit",
    "fit_count",
    "linear_predictor",
    "load_model",
    "loads",
    "make_knots",
    "partial_effect",
    "penalty_matrix",
    "predict_response",
    "predict_skip",
    "predict_trt_ms",
    "save_model",
]
