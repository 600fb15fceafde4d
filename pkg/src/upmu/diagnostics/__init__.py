"""Diagnostic analytics over synchronized phasor streams."""

from .fault import FaultLocation, locate_fault
from .impedance import ImpedanceEstimate, estimate_line_impedance, estimate_transformer_impedance, excitation_condition
from .kpca import EventFlag, KernelPCA, detect_events_kpca, phasor_windows
from .phase_id import PhaseAssignment, identify_phase
from .requirements import USE_CASES, ComplianceReport, check_requirements
from .reverse_flow import detect_reverse_flow
from .state_estimation import (
    Measurements,
    StateEstimate,
    linear_state_estimate,
    measurements_from_meters,
    wls_state_estimate,
)
from .switching import cusum_change_points
from .topology import TopologyHypothesis, VotingResult, detect_topology_voting

detect_switch_transition = cusum_change_points

__all__ = [
    "ComplianceReport",
    "EventFlag",
    "FaultLocation",
    "ImpedanceEstimate",
    "KernelPCA",
    "Measurements",
    "PhaseAssignment",
    "StateEstimate",
    "TopologyHypothesis",
    "USE_CASES",
    "VotingResult",
    "check_requirements",
    "cusum_change_points",
    "detect_events_kpca",
    "detect_reverse_flow",
    "detect_switch_transition",
    "detect_topology_voting",
    "estimate_line_impedance",
    "estimate_transformer_impedance",
    "excitation_condition",
    "identify_phase",
    "linear_state_estimate",
    "locate_fault",
    "measurements_from_meters",
    "phasor_windows",
    "wls_state_estimate",
]
