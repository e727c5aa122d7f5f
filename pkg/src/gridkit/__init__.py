"""Layered grid middleware: fabric resources, authenticated resource protocols,
collective services and a deterministic harness, over a simulated or socket network."""

from .errors import GridError
from .harness import GridWorld, Scenario, ScenarioReport, load_scenario, parse_scenario, run_scenario

__version__ = "0.1.0"

__all__ = [
    "GridError",
    "GridWorld",
    "Scenario",
    "ScenarioReport",
    "__version__",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
]
