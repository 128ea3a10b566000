"""Uncertainty-averse planar push planning with learned forward models.

The package couples a quasi-static push simulator with two uncertainty
calibrated learners (a deep ensemble of mixture density networks and a
Gaussian process regressor), a sampling-based model predictive controller
whose running cost penalises predictive uncertainty, and a decoupled
waypoint optimizer that routes a path through low-uncertainty regions of a
Monte-Carlo uncertainty map before handing it to the controller.
"""

from .features import Normalization, Prediction
from .sim import (
    BoxState,
    PushAction,
    PushDataset,
    PushRecord,
    PushSystem,
    SimParams,
    collect_dataset,
    lesion,
    load_dataset,
    random_push,
    save_dataset,
    step,
    wrap_angle,
)

__all__ = [
    "BoxState",
    "PushAction",
    "PushDataset",
    "PushRecord",
    "PushSystem",
    "SimParams",
    "Normalization",
    "Prediction",
    "collect_dataset",
    "lesion",
    "load_dataset",
    "random_push",
    "save_dataset",
    "step",
    "wrap_angle",
]

__version__ = "0.1.0"
