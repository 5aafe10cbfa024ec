"""Physics-informed recurrent identification of gas pipeline networks."""
from .assembly import SystemMatrices, build_system, woodbury_update
from .network import (
    Compressor,
    ControlKind,
    GasNetwork,
    NetworkError,
    Pipeline,
    TerminalNode,
    build_grid,
    derive_coefficients,
    network_theta,
)
from .normalize import Normalizer
from .simulator import Simulator, Trajectory, fixed_point, nominal_network, steady_state

__version__ = "0.1.0"

__all__ = [
    "Compressor",
    "ControlKind",
    "GasNetwork",
    "NetworkError",
    "Normalizer",
    "Pipeline",
    "Simulator",
    "SystemMatrices",
    "TerminalNode",
    "Trajectory",
    "build_grid",
    "build_system",
    "derive_coefficients",
    "fixed_point",
    "network_theta",
    "nominal_network",
    "steady_state",
    "woodbury_update",
]
