"""Ramp-metering control laboratory: plant models, set-valued estimation,
an exact MILP-based predictive controller, and classical baselines."""

__version__ = "0.1.0"

from .ctm import (
    AdmissibilityError,
    FreewayParams,
    Observation,
    OutputModel,
    check_admissible,
    compact_step,
    demand_fn,
    equilibrium_flow,
    equilibrium_uncongested,
    homogeneous_params,
    mainline_outflow,
    measure,
    plant_step,
    ramp_outflow,
    split_state,
    supply_fn,
)

__all__ = [
    "AdmissibilityError",
    "FreewayParams",
    "Observation",
    "OutputModel",
    "check_admissible",
    "compact_step",
    "demand_fn",
    "equilibrium_flow",
    "equilibrium_uncongested",
    "homogeneous_params",
    "mainline_outflow",
    "measure",
    "plant_step",
    "ramp_outflow",
    "split_state",
    "supply_fn",
    "__version__",
]
