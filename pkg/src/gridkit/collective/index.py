"""Soft-state index with named views, plus the failure monitor that watches it."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..connectivity.auth import Session
from ..connectivity.credentials import has_right
from ..connectivity.endpoint import GridClient, Service, require
from ..errors import AuthFailed, Denied, NotRegistered, TtlOutOfRange, UnknownOperation, UnknownView
from ..fabric.descriptor import ResourceDescriptor, matches
from ..wire.codec import Envelope, decode_value, encode_value
from ..wire.transport import EndpointAddress

MIN_TTL = 1.0
MAX_TTL = 3600.0
DEFAULT_SWEEP = 1.0


@dataclass
class Registration:
    descriptor: ResourceDescriptor
    registrant: str
    ttl: float
    received_at: float
    deadline: float
    generation: int = 1

    def to_record(self, now: float | None = None) -> dict:
        out = {
            "descriptor": self.descriptor.to_record(),
            "registrant": self.registrant,
            "ttl": self.ttl,
            "received_at": self.received_at,
            "deadline": self.deadline,
            "generation": self.generation,
        }
        if now is not None:
            out["staleness"] = now - self.received_at
        return out


@dataclass
class FailureMonitor:
    """DOWN when a registration lapses; OVERLOAD after two consecutive hot refreshes."""

    overload_queue: int = 10
    events: list[dict] = field(default_factory=list)
    _hot: dict[str, int] = field(default_factory=dict)

    def on_refresh(self, name: str, descriptor: ResourceDescriptor, now: float) -> None:
        queue = descriptor.queue_length or 0
        if queue > self.overload_queue:
            self._hot[name] = self._hot.get(name, 0) + 1
            if self._hot[name] == 2:
                self.events.append({"kind": "OVERLOAD", "resource": name, "t": now, "queue_length": queue})
        else:
            self._hot[name] = 0

    def on_expire(self, name: str, now: float) -> None:
        self._hot.pop(name, None)
        self.events.append({"kind": "DOWN", "resource": name, "t": now})


class IndexService(Service):
    kind = "index"

    def __init__(self, *args, views: Mapping[str, Mapping[str, Any]] | None = None,
                 sweep_period: float = DEFAULT_SWEEP, overload_queue: int = 10, **kwargs):
        super().__init__(*args, **kwargs)
        self.views = {name: dict(f) for name, f in (views or {}).items()}
        self.sweep_period = sweep_period
        self.entries: dict[str, Registration] = {}
        self.monitor = FailureMonitor(overload_queue)
        self._sweeper = None
        self.route("grrp", "REGISTER", self._register)
        self.route("grrp", "REFRESH", self._refresh)
        self.route("grrp", "UNREGISTER", self._unregister)
        self.route("info", "QUERY", self._query)

    def start(self) -> None:
        super().start()
        if self._sweeper is None:
            self._sweeper = self.clock.call_later(self.sweep_period, self._tick)

    def stop(self) -> None:
        super().stop()
        if self._sweeper is not None:
            self._sweeper.cancel()
            self._sweeper = None

    def _tick(self) -> None:
        self.sweep()
        self._sweeper = self.clock.call_later(self.sweep_period, self._tick)

    def sweep(self) -> list[str]:
        now = self.clock.now()
        with self._lock:
            dead = sorted(name for name, reg in self.entries.items() if reg.deadline < now)
            for name in dead:
                del self.entries[name]
                self.monitor.on_expire(name, now)
        return dead

    # -- grrp ------------------------------------------------------------------
    def _check(self, env: Envelope, session: Session) -> tuple[ResourceDescriptor, float]:
        record, ttl = require(env.payload, "descriptor", "ttl")
        desc = ResourceDescriptor.from_record(record)
        if not MIN_TTL <= ttl <= MAX_TTL:
            raise TtlOutOfRange(f"ttl {ttl} outside [{MIN_TTL:g}, {MAX_TTL:g}]")
        peer = session.peer
        if peer.kind != "service" or peer.org != desc.org:
            raise AuthFailed(f"{peer.name} may not register resources of org {desc.org}")
        return desc, float(ttl)

    def _register(self, env: Envelope, session: Session) -> tuple[str, dict]:
        desc, ttl = self._check(env, session)
        now = self.clock.now()
        with self._lock:
            reg = Registration(desc, session.peer.name, ttl, now, now + ttl, 1)
            self.entries[desc.name] = reg
            self.monitor.on_refresh(desc.name, desc, now)
        return "ACK", {"name": desc.name, "generation": reg.generation, "deadline": reg.deadline}

    def _refresh(self, env: Envelope, session: Session) -> tuple[str, dict]:
        desc, ttl = self._check(env, session)
        now = self.clock.now()
        with self._lock:
            reg = self.entries.get(desc.name)
            if reg is None or reg.deadline < now or reg.registrant != session.peer.name:
                raise NotRegistered(f"{desc.name} is not registered")
            reg.descriptor = desc
            reg.ttl = ttl
            reg.received_at = now
            reg.deadline = now + ttl
            reg.generation += 1
            self.monitor.on_refresh(desc.name, desc, now)
        return "ACK", {"name": desc.name, "generation": reg.generation, "deadline": reg.deadline}

    def _unregister(self, env: Envelope, session: Session) -> tuple[str, dict]:
        (name,) = require(env.payload, "name")
        with self._lock:
            reg = self.entries.get(name)
            if reg is not None and reg.registrant != session.peer.name:
                raise AuthFailed(f"{session.peer.name} did not register {name}")
            self.entries.pop(name, None)
        return "ACK", {"name": name, "removed": reg is not None}

    # -- queries ---------------------------------------------------------------
    def live(self) -> list[Registration]:
        now = self.clock.now()
        with self._lock:
            return [self.entries[n] for n in sorted(self.entries) if self.entries[n].deadline >= now]

    def lookup(self, view: str | None = None, filter: Mapping[str, Any] | None = None) -> list[dict]:
        if view is not None:
            if view not in self.views:
                raise UnknownView(view)
            filter = {**self.views[view], **(filter or {})}
        now = self.clock.now()
        out = []
        for reg in self.live():
            record = reg.descriptor.to_record()
            if matches(record, filter):
                out.append({**record, "staleness": now - reg.received_at, "generation": reg.generation})
        return out

    def _query(self, env: Envelope, session: Session) -> tuple[str, dict]:
        if not has_right(session.peer_rights, "info:query"):
            raise Denied("info:query not among delegated rights")
        target = env.payload.get("target", "resource")
        if target == "resource":
            return "RESULT", {"records": self.lookup(env.payload.get("view"), env.payload.get("filter"))}
        if target == "events":
            since = float(env.payload.get("since", float("-inf")))
            return "RESULT", {"records": [e for e in self.monitor.events if e["t"] >= since]}
        if target == "views":
            return "RESULT", {"records": [{"name": n, "filter": f} for n, f in sorted(self.views.items())]}
        raise UnknownOperation(f"unknown query target {target!r}")

    # -- persistence -----------------------------------------------------------
    def snapshot(self, path: str | Path) -> None:
        Path(path).write_bytes(encode_value([r.to_record() for r in self.live()]))

    def load_snapshot(self, path: str | Path) -> int:
        """Reload entries; deadlines restart from now + ttl."""
        now = self.clock.now()
        count = 0
        with self._lock:
            for rec in decode_value(Path(path).read_bytes()):
                desc = ResourceDescriptor.from_record(rec["descriptor"])
                self.entries[desc.name] = Registration(
                    desc, rec["registrant"], rec["ttl"], now, now + rec["ttl"], rec["generation"]
                )
                count += 1
        return count


def index_query(client: GridClient, index: EndpointAddress, filter: Mapping[str, Any] | None = None,
                view: str | None = None) -> list[dict]:
    payload: dict[str, Any] = {"filter": dict(filter or {})}
    if view is not None:
        payload["view"] = view
    return client.call(index, "info", "QUERY", payload).payload["records"]


def failure_events(client: GridClient, index: EndpointAddress, since: float | None = None) -> list[dict]:
    payload: dict[str, Any] = {"target": "events"}
    if since is not None:
        payload["since"] = since
    return client.call(index, "info", "QUERY", payload).payload["records"]
