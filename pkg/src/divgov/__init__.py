"""Watt-governor stability toolkit: Filippov simulation, density-function
stability checks, LMI feasibility and parameter-region maps."""

from divgov.model import GovernorParams, LurieSystem, StationarySet, build_system, hurwitz_test, relay, stationary_set, vector_field
from divgov.filippov import IntegratorConfig, Trajectory, integrate, sliding_dynamics

__all__ = [
    "GovernorParams",
    "LurieSystem",
    "StationarySet",
    "build_system",
    "hurwitz_test",
    "relay",
    "stationary_set",
    "vector_field",
    "IntegratorConfig",
    "Trajectory",
    "integrate",
    "sliding_dynamics",
]

__version__ = "0.1.0"
