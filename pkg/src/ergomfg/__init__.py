"""Ergodic mean-field games on finite state and action spaces."""

from ergomfg.errors import (
    BackendModeError,
    BudgetError,
    IterationError,
    MinorizationTooTight,
    ModelError,
    NonUniqueInvariant,
)
from ergomfg.model import (
    ControlledKernel,
    CostFunction,
    LyapunovData,
    MfgModel,
    StateSpace,
    make_affine_cost,
    make_interaction_cost,
)
from ergomfg.stationary import StationaryControl

__version__ = "0.1.0"

__all__ = [
    "BackendModeError",
    "BudgetError",
    "ControlledKernel",
    "CostFunction",
    "IterationError",
    "LyapunovData",
    "MfgModel",
    "MinorizationTooTight",
    "ModelError",
    "NonUniqueInvariant",
    "StateSpace",
    "StationaryControl",
    "make_affine_cost",
    "make_interaction_cost",
]
