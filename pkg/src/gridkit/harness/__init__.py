from .faults import FaultInjector, inject
from .runner import ScenarioReport, run_scenario
from .scenario import (
    FaultEvent,
    HostSpec,
    OrgSpec,
    Scenario,
    ServiceSpec,
    UserSpec,
    VOSpec,
    WorkloadSpec,
    host_identity,
    load_scenario,
    parse_scenario,
    save_scenario,
    service_identity,
    user_identity,
)
from .workloads import DATA_PAYLOAD_TYPES, run_coupled, run_jobs, run_raytrace
from .world import GridWorld

__all__ = [
    "DATA_PAYLOAD_TYPES",
    "FaultEvent",
    "FaultInjector",
    "GridWorld",
    "HostSpec",
    "OrgSpec",
    "Scenario",
    "ScenarioReport",
    "ServiceSpec",
    "UserSpec",
    "VOSpec",
    "WorkloadSpec",
    "host_identity",
    "inject",
    "load_scenario",
    "parse_scenario",
    "run_coupled",
    "run_jobs",
    "run_raytrace",
    "run_scenario",
    "save_scenario",
    "service_identity",
    "user_identity",
]
