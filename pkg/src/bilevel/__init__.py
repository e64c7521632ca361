"""Robust bi-level variable selection for grouped regression.

A group-penalized M-estimator (Huber, Tukey, Cauchy or least squares loss
with a group lasso or group MCP penalty) is followed by elementwise hard
thresholding. Both tuning parameters are picked by cross-validation.
"""

__version__ = "0.1.0"

from .estimator import TuningGrid, cross_validate, default_grid, fit_two_stage, hard_threshold
from .losses import LossSpec
from .model import (
    CoefficientVector,
    Dataset,
    GroundTruth,
    GroupStructure,
    ValidationError,
    WeightScheme,
)
from .optimizer import SolverConfig, SolverError, solve_gp, two_step_fit
from .penalties import PenaltySpec

__all__ = [
    "CoefficientVector", "Dataset", "GroundTruth", "GroupStructure", "LossSpec",
    "PenaltySpec", "SolverConfig", "SolverError", "TuningGrid", "ValidationError",
    "WeightScheme", "cross_validate", "default_grid", "fit_two_stage", "hard_threshold",
    "solve_gp", "two_step_fit",
]
