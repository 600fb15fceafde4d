"""Command-line surface: scenarios, archives, store access and reports."""

from .main import build_parser, main
from .runner import RunManifest, run_scenario
from .scenario import Scenario, load_scenario, parse_scenario

__all__ = ["RunManifest", "Scenario", "build_parser", "load_scenario", "main", "parse_scenario", "run_scenario"]
