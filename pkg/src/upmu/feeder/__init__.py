"""Feeder model, radial power flow and uPMU telemetry synthesis."""

from .equations import line_drop, transformer_primary_current, transformer_secondary
from .model import (
    FeederModel,
    LineBranch,
    Load,
    Meter,
    Shunt,
    SwitchBranch,
    TransformerBranch,
    balanced_voltages,
    transformer_ratio_matrix,
)
from .powerflow import PowerFlowSolution, radial_tree, solve_power_flow
from .telemetry import (
    Event,
    LoadProfiles,
    MeterStream,
    NoiseModel,
    Telemetry,
    random_walk_profiles,
    report_timestamps,
    simulate_telemetry,
)

__all__ = [
    "Event",
    "FeederModel",
    "LineBranch",
    "Load",
    "LoadProfiles",
    "Meter",
    "MeterStream",
    "NoiseModel",
    "PowerFlowSolution",
    "Shunt",
    "SwitchBranch",
    "Telemetry",
    "TransformerBranch",
    "balanced_voltages",
    "line_drop",
    "radial_tree",
    "random_walk_profiles",
    "report_timestamps",
    "simulate_telemetry",
    "solve_power_flow",
    "transformer_primary_current",
    "transformer_ratio_matrix",
    "transformer_secondary",
]
