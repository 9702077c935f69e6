"""Power-system side: case data, power flow and transient dynamics."""

from .case import GridCase, ParseError, PowerFlowDiverged, read_case, solve_power_flow
from .dynamics import (AlreadyTripped, GeneratorTrip, GridCheckpoint, GridEvent, GridSimulator, GridState,
                       IntegrationDiverged, LoadReduction, NoEquilibrium, PowerModel, Trajectory,
                       UnknownTarget, init_steady_state, integrate, load_case)

__all__ = [
    "GridCase", "ParseError", "PowerFlowDiverged", "read_case", "solve_power_flow",
    "AlreadyTripped", "GeneratorTrip", "GridCheckpoint", "GridEvent", "GridSimulator", "GridState",
    "IntegrationDiverged", "LoadReduction", "NoEquilibrium", "PowerModel", "Trajectory",
    "UnknownTarget", "init_steady_state", "integrate", "load_case",
]
