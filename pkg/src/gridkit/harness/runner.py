"""Run a scenario end to end and collect its report."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import Deadline, GridError
from ..wire.codec import encode_value
from .faults import FaultInjector
from .scenario import Scenario
from .workloads import RUNNERS
from .world import GridWorld

log = logging.getLogger(__name__)


@dataclass
class ScenarioReport:
    scenario: str
    seed: int
    transport: str
    tasks: list[dict] = field(default_factory=list)
    workloads: list[dict] = field(default_factory=list)
    message_counts: dict[str, int] = field(default_factory=dict)
    secret_use: dict[str, int] = field(default_factory=dict)
    proxy_inits: dict[str, int] = field(default_factory=dict)
    decisions: list[dict] = field(default_factory=list)
    failure_events: list[dict] = field(default_factory=list)
    faults: list[dict] = field(default_factory=list)
    registrations: dict[str, Any] = field(default_factory=dict)
    fabric_events: list[dict] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    started_at: float = 0.0
    finished_at: float = 0.0

    def to_record(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "transport": self.transport,
            "tasks": self.tasks,
            "workloads": self.workloads,
            "message_counts": self.message_counts,
            "secret_use": self.secret_use,
            "proxy_inits": self.proxy_inits,
            "decisions": self.decisions,
            "failure_events": self.failure_events,
            "faults": self.faults,
            "registrations": self.registrations,
            "fabric_events": self.fabric_events,
            "trace": self.trace,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    def to_bytes(self) -> bytes:
        return encode_value(_encodable(self.to_record()))

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        path.with_suffix(path.suffix + ".txt").write_text(self.summary_text(), encoding="utf-8")

    # convenience views used by tests and the summary
    def tasks_in(self, state: str) -> list[dict]:
        return [t for t in self.tasks if t.get("state") == state]

    def denied(self) -> list[dict]:
        return [d for d in self.decisions if d.get("effect") == "deny" or d.get("state") == "denied"]

    def summary_text(self) -> str:
        states: dict[str, int] = {}
        for task in self.tasks:
            states[task.get("state", "?")] = states.get(task.get("state", "?"), 0) + 1
        lines = [
            f"scenario {self.scenario} (seed {self.seed}, {self.transport})",
            f"simulated time {self.started_at:.3f} -> {self.finished_at:.3f}",
            f"tasks: {len(self.tasks)} " + " ".join(f"{k}={v}" for k, v in sorted(states.items())),
        ]
        for w in self.workloads:
            status = w.get("error", {}).get("code", "ok") if w.get("error") else "ok"
            lines.append(f"  workload {w['workload']} {w['kind']}: {status}")
            if "per_host" in w:
                lines.append("    per host: " + ", ".join(f"{h}={n}" for h, n in w["per_host"].items()))
        lines.append("messages: " + ", ".join(f"{p}={n}" for p, n in self.message_counts.items()))
        lines.append("long-term unlocks: " + ", ".join(f"{u}={n}" for u, n in self.secret_use.items()))
        lines.append("proxy inits: " + ", ".join(f"{u}={n}" for u, n in self.proxy_inits.items()))
        allow = sum(1 for d in self.decisions if d.get("effect") == "allow")
        lines.append(f"policy decisions: {allow} allow, {len(self.denied())} deny")
        for d in self.denied():
            lines.append(f"  deny {d.get('operation', 'co-reserve')} on {d.get('host')}: {d.get('reason')}")
        lines.append(f"failure events: {len(self.failure_events)}")
        for e in self.failure_events:
            lines.append(f"  {e['kind']} {e['resource']} at {e['t']:.3f}")
        for f in self.faults:
            lines.append(f"  fault {f['kind']} {f['target']} at {f['fired_at']:.3f}")
        regs = self.registrations
        lines.append(
            f"registrations: {len(regs.get('before_shutdown', []))} live before shutdown, "
            f"{len(regs.get('after_shutdown', []))} after"
        )
        lines.append(f"trace: {len(self.trace)} messages")
        return "\n".join(lines) + "\n"


def _encodable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _encodable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_encodable(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted(_encodable(v) for v in value)
    return value


def run_scenario(scenario: Scenario, transport: str = "sim", world: GridWorld | None = None) -> ScenarioReport:
    """Boot, run every workload in order, shut down, report.

    Workload failures are recorded per workload; only running past the
    scenario deadline raises (``Deadline``, with the partial report attached
    as ``exc.report``).
    """
    world = world or GridWorld(scenario, transport)
    report = ScenarioReport(scenario.name, scenario.seed, world.mode, started_at=world.now())
    injector = FaultInjector(world, scenario.faults)
    deadline_error: Deadline | None = None
    try:
        world.start()
        injector.arm()
        for i, workload in enumerate(scenario.workloads):
            try:
                result = RUNNERS[workload.kind](world, workload, index=i, progress=injector.on_progress)
            except Deadline as exc:
                deadline_error = exc
                report.workloads.append({"kind": workload.kind, "workload": i, "error": exc.to_record()})
                break
            except GridError as exc:
                log.info("workload %d (%s) failed: %s", i, workload.kind, exc)
                report.workloads.append({"kind": workload.kind, "workload": i, "error": exc.to_record()})
                continue
            report.tasks.extend(result.pop("tasks"))
            report.workloads.append(result)
        if scenario.drain and world.mode == "sim":
            # let scheduled faults and in-flight work play out before shutdown
            last = max((f.time for f in scenario.faults if f.time is not None), default=None)
            if last is not None and world.t0 + last > world.now():
                world.clock.run_until(deadline=world.t0 + last)
        injector.disarm()
        report.registrations["before_shutdown"] = _registrations(world)
        world.shutdown()
        report.registrations["after_shutdown"] = _registrations(world)
    finally:
        world.close()
    report.finished_at = world.now()
    report.message_counts = world.net.message_counts()
    report.secret_use = world.secret_use()
    report.proxy_inits = dict(sorted(world.proxy_inits.items()))
    report.decisions = world.decisions()
    report.failure_events = list(world.index.monitor.events) if world.index is not None else []
    report.faults = list(injector.fired)
    report.fabric_events = world.fabric_events()
    if world.mode == "sim":
        report.trace = world.net.trace_records()
    if deadline_error is not None:
        deadline_error.report = report
        raise deadline_error
    return report


def _registrations(world: GridWorld) -> list[dict]:
    if world.index is None:
        return []
    return [
        {"name": r.descriptor.name, "generation": r.generation, "deadline": r.deadline}
        for r in sorted(world.index.entries.values(), key=lambda r: r.descriptor.name)
    ]
