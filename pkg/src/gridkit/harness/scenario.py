"""Scenario files: what organizations, VOs, services, workloads and faults to run.

A scenario is a plain record (canonical encoding or JSON on disk). Loading
validates it completely; every problem is reported with the path of the
offending field, e.g. ``workloads[0].vo``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..errors import GridError, ValidationError
from ..policy import PolicyRule
from ..wire.codec import decode_value, encode_value
from ..wire.transport import EndpointAddress, SimNetConfig

HOST_KINDS = ("compute", "storage", "catalog")
WORKLOAD_KINDS = ("jobs", "raytrace", "coupled")
FAULT_KINDS = ("host-crash", "host-restart", "partition", "heal")


def user_identity(org: str, name: str) -> str:
    return f"/org={org}/user={name}"


def host_identity(org: str, name: str) -> str:
    return f"/org={org}/host={name}"


def service_identity(org: str, name: str) -> str:
    return f"/org={org}/service={name}"


@dataclass
class UserSpec:
    name: str
    org: str
    rights: tuple[str, ...] = ("*",)
    proxy_rights: tuple[str, ...] = ("*",)
    proxy_lifetime: float = 12 * 3600.0

    @property
    def identity(self) -> str:
        return user_identity(self.org, self.name)


@dataclass
class HostSpec:
    name: str
    org: str
    kind: str = "compute"
    slots: int = 1
    slot_speed: float = 1.0
    storage_bytes: int = 1_000_000
    bandwidth_Bps: int = 10_000_000
    tags: tuple[str, ...] = ()
    gridmap: Mapping[str, str] | None = None  # None: every declared user, account = short name
    policy: list[PolicyRule] = field(default_factory=lambda: [PolicyRule()])
    files: Mapping[str, bytes] = field(default_factory=dict)
    calendar: bool = True
    hold_timeout: float = 30.0
    trust_community_ca: bool = False
    community_account: str = "community"
    queue_limit: int = 1000
    ttl: float = 30.0
    refresh_interval: float | None = None

    @property
    def address(self) -> EndpointAddress:
        kind = "storage" if self.kind == "storage" else "resource-host"
        return EndpointAddress(self.org, kind, self.name)

    @property
    def identity(self) -> str:
        return host_identity(self.org, self.name)


@dataclass
class OrgSpec:
    name: str
    users: list[UserSpec] = field(default_factory=list)
    hosts: list[HostSpec] = field(default_factory=list)


@dataclass
class VOSpec:
    name: str
    roster: tuple[str, ...] = ()
    rights: tuple[str, ...] = ("*",)


@dataclass
class ServiceSpec:
    org: str
    name: str
    options: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class WorkloadSpec:
    kind: str
    owner: str
    vo: str = ""
    tasks: int = 1
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class FaultEvent:
    kind: str
    target: Any
    time: float | None = None
    at_progress: float | None = None

    def to_record(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind, "target": self.target}
        if self.time is not None:
            out["time"] = self.time
        if self.at_progress is not None:
            out["at_progress"] = self.at_progress
        return out


@dataclass
class Scenario:
    name: str
    seed: int = 0
    start_time: float = 0.0
    deadline: float = 3600.0
    authority: str = "/ca=Grid"
    organizations: list[OrgSpec] = field(default_factory=list)
    vos: list[VOSpec] = field(default_factory=list)
    index: ServiceSpec | None = None
    cas: ServiceSpec | None = None
    coalloc: ServiceSpec | None = None
    cred_store: ServiceSpec | None = None
    workloads: list[WorkloadSpec] = field(default_factory=list)
    net: SimNetConfig = field(default_factory=SimNetConfig)
    faults: list[FaultEvent] = field(default_factory=list)
    drain: bool = True
    raw: Mapping[str, Any] = field(default_factory=dict, repr=False)

    # lookups used by the world builder
    def users(self) -> list[UserSpec]:
        return [u for org in self.organizations for u in org.users]

    def hosts(self) -> list[HostSpec]:
        return [h for org in self.organizations for h in org.hosts]

    def host(self, name: str) -> HostSpec:
        for h in self.hosts():
            if h.name == name or str(h.address) == name:
                return h
        raise KeyError(name)

    def user(self, identity: str) -> UserSpec:
        for u in self.users():
            if u.identity == identity or u.name == identity:
                return u
        raise KeyError(identity)

    def to_record(self) -> dict:
        return dict(self.raw)

    def to_bytes(self) -> bytes:
        return encode_value(_plain(self.raw))


def _plain(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# -- parsing ---------------------------------------------------------------------
class _Reader:
    def __init__(self, record: Any, path: str):
        if not isinstance(record, Mapping):
            raise ValidationError(path or "<root>", "expected a record")
        self.record = record
        self.path = path

    def at(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, default=..., check=None):
        if key not in self.record:
            if default is ...:
                raise ValidationError(self.at(key), "required field is missing")
            return default
        value = self.record[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, kind) or (kind in (int, float) and isinstance(value, bool)):
            name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            raise ValidationError(self.at(key), f"expected {name}, got {type(value).__name__}")
        if check is not None:
            problem = check(value)
            if problem:
                raise ValidationError(self.at(key), problem)
        return value

    def strings(self, key: str, default=()) -> tuple[str, ...]:
        values = self.get(key, (list, tuple), list(default))
        for i, v in enumerate(values):
            if not isinstance(v, str):
                raise ValidationError(f"{self.at(key)}[{i}]", "expected str")
        return tuple(values)

    def items(self, key: str) -> list[tuple[str, Any]]:
        values = self.get(key, (list, tuple), [])
        return [(f"{self.at(key)}[{i}]", v) for i, v in enumerate(values)]

    def unknown(self, allowed: set[str]) -> None:
        extra = sorted(set(self.record) - allowed)
        if extra:
            raise ValidationError(self.at(extra[0]), "unknown field")


def _positive(v) -> str | None:
    return None if v > 0 else "must be positive"


def _files(record: Any, path: str) -> dict[str, bytes]:
    if not isinstance(record, Mapping):
        raise ValidationError(path, "expected a record of path -> content")
    out = {}
    for p, content in record.items():
        if isinstance(content, str):
            content = content.encode("utf-8")
        elif isinstance(content, int) and not isinstance(content, bool):
            content = b"x" * content  # a size: synthetic content
        if not isinstance(content, (bytes, bytearray)):
            raise ValidationError(f"{path}.{p}", "file content must be text, bytes or a size")
        if not str(p).startswith("/"):
            raise ValidationError(f"{path}.{p}", "file paths must be absolute")
        out[str(p)] = bytes(content)
    return out


def _policy(items: list[tuple[str, Any]]) -> list[PolicyRule]:
    rules = []
    for path, rec in items:
        if not isinstance(rec, Mapping):
            raise ValidationError(path, "expected a rule record")
        try:
            rules.append(PolicyRule.from_record(rec))
        except (ValueError, TypeError, KeyError) as exc:
            raise ValidationError(path, f"bad policy rule: {exc}") from None
    return rules


def _host(r: _Reader, org: str) -> HostSpec:
    r.unknown({
        "name", "kind", "slots", "slot_speed", "storage_bytes", "bandwidth_Bps", "tags", "gridmap", "policy", "files",
        "calendar", "hold_timeout", "trust_community_ca", "community_account", "queue_limit", "ttl",
        "refresh_interval",
    })
    gridmap = r.get("gridmap", Mapping, None)
    if gridmap is not None:
        for ident, acct in gridmap.items():
            if not isinstance(acct, str):
                raise ValidationError(f"{r.at('gridmap')}.{ident}", "local account must be a string")
    policy = _policy(r.items("policy")) if "policy" in r.record else [PolicyRule()]
    return HostSpec(
        name=r.get("name", str),
        org=org,
        kind=r.get("kind", str, "compute", lambda v: None if v in HOST_KINDS else f"must be one of {HOST_KINDS}"),
        slots=r.get("slots", int, 1, lambda v: None if v >= 1 else "must be at least 1"),
        slot_speed=r.get("slot_speed", float, 1.0, _positive),
        storage_bytes=r.get("storage_bytes", int, 1_000_000, lambda v: None if v >= 0 else "must be >= 0"),
        bandwidth_Bps=r.get("bandwidth_Bps", int, 10_000_000, _positive),
        tags=r.strings("tags"),
        gridmap=dict(gridmap) if gridmap is not None else None,
        policy=policy,
        files=_files(r.record.get("files", {}), r.at("files")),
        calendar=r.get("calendar", bool, True),
        hold_timeout=r.get("hold_timeout", float, 30.0, _positive),
        trust_community_ca=r.get("trust_community_ca", bool, False),
        community_account=r.get("community_account", str, "community"),
        queue_limit=r.get("queue_limit", int, 1000, _positive),
        ttl=r.get("ttl", float, 30.0, lambda v: None if 1.0 <= v <= 3600.0 else "ttl must lie in [1, 3600]"),
        refresh_interval=r.get("refresh_interval", float, None, _positive),
    )


def _service(r: _Reader, known: set[str]) -> ServiceSpec:
    org = r.get("org", str)
    if org not in known:
        raise ValidationError(r.at("org"), f"undeclared organization {org!r}")
    options = {k: v for k, v in r.record.items() if k not in ("org", "name")}
    return ServiceSpec(org, r.get("name", str), options)


def parse_scenario(record: Any) -> Scenario:
    root = _Reader(record, "")
    root.unknown({
        "name", "seed", "start_time", "deadline", "authority", "organizations", "vos", "services", "workloads", "net",
        "faults", "drain", "endpoints",
    })
    orgs: list[OrgSpec] = []
    seen_orgs: set[str] = set()
    seen_hosts: set[str] = set()
    for path, rec in root.items("organizations"):
        r = _Reader(rec, path)
        r.unknown({"name", "users", "hosts"})
        name = r.get("name", str)
        if name in seen_orgs:
            raise ValidationError(r.at("name"), f"organization {name!r} declared twice")
        seen_orgs.add(name)
        org = OrgSpec(name)
        for upath, urec in r.items("users"):
            u = _Reader(urec, upath)
            u.unknown({"name", "rights", "proxy_rights", "proxy_lifetime"})
            org.users.append(
                UserSpec(
                    u.get("name", str),
                    name,
                    u.strings("rights", ("*",)),
                    u.strings("proxy_rights", ("*",)),
                    u.get("proxy_lifetime", float, 12 * 3600.0, _positive),
                )
            )
        for hpath, hrec in r.items("hosts"):
            host = _host(_Reader(hrec, hpath), name)
            if host.name in seen_hosts:
                raise ValidationError(f"{hpath}.name", f"host {host.name!r} declared twice")
            seen_hosts.add(host.name)
            org.hosts.append(host)
        orgs.append(org)

    identities = {u.identity for o in orgs for u in o.users}
    vos: list[VOSpec] = []
    for path, rec in root.items("vos"):
        r = _Reader(rec, path)
        r.unknown({"name", "roster", "rights"})
        roster = r.strings("roster")
        for i, member in enumerate(roster):
            if member not in identities:
                raise ValidationError(f"{r.at('roster')}[{i}]", f"undeclared identity {member!r}")
        vos.append(VOSpec(r.get("name", str), roster, r.strings("rights", ("*",))))
    vo_names = {v.name for v in vos}

    for org in orgs:
        for host in org.hosts:
            for i, rule in enumerate(host.policy):
                if rule.vo != "*" and rule.vo not in vo_names:
                    raise ValidationError(
                        f"organizations[{orgs.index(org)}].hosts[{org.hosts.index(host)}].policy[{i}].vo",
                        f"undeclared VO {rule.vo!r}",
                    )

    services = _Reader(root.record.get("services", {}), "services")
    services.unknown({"index", "cas", "coalloc", "cred_store"})
    specs = {}
    for key in ("index", "cas", "coalloc", "cred_store"):
        if key in services.record:
            specs[key] = _service(_Reader(services.record[key], services.at(key)), seen_orgs)

    workloads: list[WorkloadSpec] = []
    for path, rec in root.items("workloads"):
        r = _Reader(rec, path)
        kind = r.get("kind", str, check=lambda v: None if v in WORKLOAD_KINDS else f"must be one of {WORKLOAD_KINDS}")
        owner = r.get("owner", str)
        if owner not in identities:
            raise ValidationError(r.at("owner"), f"undeclared identity {owner!r}")
        vo = r.get("vo", str, "")
        if vo and vo not in vo_names:
            raise ValidationError(r.at("vo"), f"undeclared VO {vo!r}")
        tasks = r.get("tasks", int, 1, lambda v: None if v >= 1 else "task count must be at least 1")
        params = {k: v for k, v in r.record.items() if k not in ("kind", "owner", "vo", "tasks")}
        for key in ("hosts", "host"):
            names = params.get(key)
            for i, h in enumerate([names] if isinstance(names, str) else names or []):
                if h not in seen_hosts:
                    raise ValidationError(f"{r.at(key)}[{i}]" if key == "hosts" else r.at(key),
                                          f"undeclared host {h!r}")
        for i, job in enumerate(params.get("jobs", [])):
            h = job.get("host") if isinstance(job, Mapping) else None
            if h is not None and h not in seen_hosts:
                raise ValidationError(f"{r.at('jobs')}[{i}].host", f"undeclared host {h!r}")
        if kind in ("raytrace", "coupled") and "index" not in specs:
            raise ValidationError(r.at("kind"), f"{kind} workloads need services.index")
        workloads.append(WorkloadSpec(kind, owner, vo, tasks, params))

    faults: list[FaultEvent] = []
    crashed: set[str] = set()
    cut: set[frozenset] = set()
    for path, rec in root.items("faults"):
        r = _Reader(rec, path)
        r.unknown({"kind", "target", "time", "at_progress"})
        kind = r.get("kind", str, check=lambda v: None if v in FAULT_KINDS else f"must be one of {FAULT_KINDS}")
        target = r.record.get("target")
        time = r.get("time", float, None)
        at_progress = r.get("at_progress", float, None,
                            lambda v: None if 0.0 <= v <= 1.0 else "progress must lie in [0, 1]")
        if (time is None) == (at_progress is None):
            raise ValidationError(path, "give exactly one of time or at_progress")
        if kind in ("host-crash", "host-restart"):
            if not isinstance(target, str) or target not in seen_hosts:
                raise ValidationError(r.at("target"), f"undeclared host {target!r}")
            if kind == "host-restart" and target not in crashed:
                raise ValidationError(r.at("target"), "restart without an earlier crash of the same host")
            (crashed.add if kind == "host-crash" else crashed.discard)(target)
        else:
            if not isinstance(target, (list, tuple)) or len(target) != 2 or not all(isinstance(t, str) for t in target):
                raise ValidationError(r.at("target"), "partition targets are a pair of endpoint names")
            pair = frozenset(target)
            if kind == "heal" and pair not in cut:
                raise ValidationError(r.at("target"), "heal without an earlier partition of the same pair")
            (cut.add if kind == "partition" else cut.discard)(pair)
        faults.append(FaultEvent(kind, list(target) if isinstance(target, (list, tuple)) else target, time, at_progress))

    for addr, where in root.get("endpoints", Mapping, {}).items():
        try:
            EndpointAddress.parse(str(addr))
        except ValueError as exc:
            raise ValidationError(f"endpoints.{addr}", str(exc)) from None
        if not isinstance(where, str) or not where.rpartition(":")[2].isdigit():
            raise ValidationError(f"endpoints.{addr}", "expected host:port")

    try:
        net = SimNetConfig.from_record(root.get("net", Mapping, {}))
    except (ValueError, TypeError, KeyError) as exc:
        raise ValidationError("net", str(exc)) from None

    return Scenario(
        name=root.get("name", str),
        seed=root.get("seed", int, 0),
        start_time=root.get("start_time", float, 0.0),
        deadline=root.get("deadline", float, 3600.0, _positive),
        authority=root.get("authority", str, "/ca=Grid"),
        organizations=orgs,
        vos=vos,
        index=specs.get("index"),
        cas=specs.get("cas"),
        coalloc=specs.get("coalloc"),
        cred_store=specs.get("cred_store"),
        workloads=workloads,
        net=net,
        faults=faults,
        drain=root.get("drain", bool, True),
        raw=dict(record),
    )


def load_scenario(path: str | Path) -> Scenario:
    data = Path(path).read_bytes()
    try:
        if data[:1] in (b"{", b"[") or data[:1].isspace():
            record = json.loads(data.decode("utf-8"))
        else:
            record = decode_value(data)
    except (ValueError, UnicodeDecodeError, GridError) as exc:
        raise ValidationError("<file>", f"unreadable scenario: {exc}") from None
    return parse_scenario(record)


def save_scenario(record: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_bytes(encode_value(_plain(record)))
