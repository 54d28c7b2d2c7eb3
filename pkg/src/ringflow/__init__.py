"""Mixed-autonomy traffic control on rings with transfer to open highways.

Simulates human car-following on single-lane circular tracks, trains a
small Gaussian policy with trust-region policy optimization to dissipate
stop-and-go waves, and evaluates the trained controller zero-shot on a
multi-lane bottleneck highway.
"""
from ._backend import BACKEND
from .dynamics import (
    DEFAULT_VEHICLE_LENGTH,
    CollisionError,
    IdmParams,
    RingState,
    VehicleKind,
    VehicleState,
    desired_gap,
    equilibrium_speed,
    headway,
    idm_accel,
    step_string,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DEFAULT_VEHICLE_LENGTH",
    "CollisionError",
    "IdmParams",
    "RingState",
    "VehicleKind",
    "VehicleState",
    "desired_gap",
    "equilibrium_speed",
    "headway",
    "idm_accel",
    "step_string",
    "__version__",
]
