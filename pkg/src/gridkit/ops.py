"""Operator-level operations shared by the command line and the HTTP service.

Each function returns plain records, which is what both front ends print
or serialize. A :class:`GridContext` supplies the transport, clock, signer
and trust anchor; in ``sim`` mode it boots the configured grid in-process,
in ``socket`` mode it talks to daemons listed in the config's endpoint
table using keys kept in a state directory.
"""

from __future__ import annotations

import dataclasses
import os
import re
import signal
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .collective.broker import discover_and_rank
from .collective.cas import request_capability
from .collective.coalloc import Leg, co_reserve_end_to_end, request_co_reservation
from .collective.replica import replica_locate, replica_register
from .connectivity.credentials import (
    CertificateAuthority,
    Credential,
    Delegation,
    Identity,
    ProxyCredential,
    TrustStore,
    create_proxy,
)
from .connectivity.credstore import fetch_proxy, store_proxy
from .connectivity.endpoint import GridClient
from .connectivity.signing import Ed25519Signer
from .errors import GridError, NotFound, ValidationError
from .harness.runner import ScenarioReport, run_scenario
from .harness.scenario import Scenario, load_scenario
from .harness.world import CREDENTIAL_LIFETIME, GridWorld
from .ids import IdSource
from .resource import client as rc
from .resource.types import JobRequest, TransferRequest
from .wire.codec import decode_value, encode_value
from .wire.transport import EndpointAddress

DEFAULT_PROXY_LIFETIME = 12 * 3600.0


# -- key material on disk ---------------------------------------------------------
def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name.strip("/")) or "root"


def _write_private(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.chmod(path, 0o600)


class KeyStore:
    """Authority key, issued credentials and the trust anchor under one directory.

    Secrets are written with mode 0600.
    """

    def __init__(self, root: str | Path, signer: Ed25519Signer, authority: str):
        self.root = Path(root)
        self.signer = signer
        self.authority = authority
        self._ca: CertificateAuthority | None = None

    @property
    def ca_path(self) -> Path:
        return self.root / "ca.key"

    @property
    def trust_path(self) -> Path:
        return self.root / "trust"

    def credential_path(self, subject: str) -> Path:
        return self.root / "ids" / f"{_slug(subject)}.cred"

    def ca(self, create: bool = False) -> CertificateAuthority:
        if self._ca is not None:
            return self._ca
        if self.ca_path.exists():
            rec = decode_value(self.ca_path.read_bytes())
            self.signer.import_secret(rec["handle"], rec["secret"], owner=rec["name"], long_term=True)
            self._ca = CertificateAuthority(Identity(rec["name"], "authority"), rec["handle"], self.signer)
        elif create:
            self._ca = CertificateAuthority.create(self.authority, self.signer)
            secret = self.signer.export_secret(self._ca.key_handle)
            _write_private(self.ca_path, encode_value(
                {"name": self._ca.identity.name, "handle": self._ca.key_handle, "secret": secret}))
            TrustStore.of(self._ca).save(self.trust_path)
        else:
            raise NotFound(f"no authority key in {self.root}; run 'gridctl id issue' first")
        return self._ca

    def trust(self) -> TrustStore:
        if not self.trust_path.exists():
            raise NotFound(f"no trust anchor in {self.root}")
        return TrustStore.load(self.trust_path)

    def issue(self, subject: Identity, rights: Iterable[str], lifetime: float, now: float) -> Credential:
        ca = self.ca(create=True)
        cred = ca.issue(subject, rights, now - 60.0, now + lifetime)
        _write_private(self.credential_path(subject.name), encode_value(Delegation.of(cred, self.signer).to_record()))
        return cred

    def load(self, subject: str) -> Credential:
        path = self.credential_path(subject)
        if not path.exists():
            raise NotFound(f"no credential for {subject} in {self.root}")
        return Delegation.from_record(decode_value(path.read_bytes())).install(self.signer)

    def credential_for(self, now: float):
        """Loader for GridWorld: reuse a stored credential, issue one if missing."""

        def get(subject: Identity, rights: Iterable[str]) -> Credential:
            if self.credential_path(subject.name).exists():
                return self.load(subject.name)
            return self.issue(subject, rights, CREDENTIAL_LIFETIME, now)

        return get


# -- grid context -----------------------------------------------------------------
def client_address(subject: str) -> EndpointAddress:
    ident = Identity(subject)
    last = subject.rstrip("/").rsplit("/", 1)[-1]
    name = last.split("=", 1)[-1] or "anonymous"
    return EndpointAddress(ident.org or "none", "client", name)


class GridContext:
    def __init__(self, scenario: Scenario, transport: str = "sim", seed: int | None = None,
                 state_dir: str | Path | None = None, timeout: float = 5.0):
        if seed is not None and transport == "sim":
            scenario = dataclasses.replace(scenario, seed=seed)
        self.scenario = scenario
        self.transport = transport
        self.timeout = timeout
        self.keys: KeyStore | None = None
        if transport == "sim":
            self.world = GridWorld(scenario, "sim")
            self.world.start()
            self.signer = self.world.signer
        elif transport == "socket":
            self.signer = Ed25519Signer()
            self.keys = KeyStore(state_dir or default_state_dir(), self.signer, scenario.authority)
            self.world = None
            from .wire.sockets import SocketTransport
            from .harness.world import _directory

            self.net = SocketTransport(_directory(scenario))
        else:
            raise ValidationError("--transport", f"unknown transport {transport!r}")
        self.ids = self.world.ids if self.world is not None else IdSource()

    @property
    def clock(self):
        return self.world.clock if self.world is not None else self.net.clock

    def now(self) -> float:
        return self.clock.now()

    def trust(self) -> TrustStore:
        if self.world is not None:
            return self.world.trust_store()
        assert self.keys is not None
        return self.keys.trust()

    def user_credential(self, subject: str) -> Credential:
        if self.world is not None:
            return self.world.user_credentials[self.scenario.user(subject).identity]
        assert self.keys is not None
        return self.keys.load(subject)

    def client(self, credential: Credential) -> GridClient:
        net = self.world.net if self.world is not None else self.net
        return GridClient(net, client_address(credential.subject.name), credential, self.trust(), self.signer,
                          self.ids, timeout=self.timeout)

    def resolve(self, name: str) -> EndpointAddress:
        if self.world is not None:
            return self.world.resolve(name)
        scn = self.scenario
        for host in scn.hosts():
            if name in (host.name, str(host.address)):
                return host.address
        for kind, spec in (("index", scn.index), ("ca-server", scn.cas), ("coalloc", scn.coalloc),
                           ("cred-store", scn.cred_store)):
            if spec is not None and name in (spec.name, kind):
                return EndpointAddress(spec.org, kind, spec.name)
        try:
            return EndpointAddress.parse(name)
        except ValueError:
            raise ValidationError("endpoint", f"unknown endpoint {name!r}") from None

    def index_address(self) -> EndpointAddress:
        if self.scenario.index is None:
            raise ValidationError("services.index", "the grid config declares no index")
        return EndpointAddress(self.scenario.index.org, "index", self.scenario.index.name)

    def close(self) -> None:
        if self.world is not None:
            self.world.close()
        else:
            self.net.close()


def default_state_dir() -> Path:
    return Path(os.environ.get("GRIDKIT_STATE", Path.home() / ".gridkit"))


def open_context(config: str | Path | None, transport: str = "sim", seed: int | None = None,
                 state_dir: str | Path | None = None) -> GridContext:
    if config is None:
        raise ValidationError("--config", "a grid config file is required")
    return GridContext(load_scenario(config), transport, seed, state_dir)


# -- identities and proxies ---------------------------------------------------------
def issue_identity(ctx: GridContext, subject: str, kind: str = "user", rights: Sequence[str] = ("*",),
                   lifetime: float = CREDENTIAL_LIFETIME) -> dict:
    ident = Identity(subject, kind)
    if ctx.keys is not None:
        cred = ctx.keys.issue(ident, rights, lifetime, ctx.now())
        path = str(ctx.keys.credential_path(subject))
    else:
        cred = ctx.world.ca.issue(ident, rights, ctx.now() - 60.0, ctx.now() + lifetime)
        path = None
    return {"subject": subject, "kind": kind, "rights": sorted(cred.rights), "not_after": cred.not_after,
            "issuer": cred.issuer.name, "path": path}


def proxy_init(ctx: GridContext, subject: str, restrict: Sequence[str] = ("*",),
               lifetime: float = DEFAULT_PROXY_LIFETIME, parent: Credential | None = None) -> Delegation:
    """Derive a proxy from the user's long-term credential (or from ``parent``)."""
    base = parent if parent is not None else ctx.user_credential(subject)
    proxy = create_proxy(base, restrict, lifetime, ctx.signer, ctx.now())
    return Delegation.of(proxy, ctx.signer)


def proxy_info(credential: Credential, now: float) -> dict:
    return {
        "subject": credential.subject.name,
        "rights": sorted(credential.rights),
        "remaining": max(0.0, credential.not_after - now),
        "depth": credential.depth,
        "proxy": isinstance(credential, ProxyCredential),
    }


def save_proxy(delegation: Delegation, path: str | Path) -> None:
    _write_private(Path(path), encode_value(delegation.to_record()))


def load_proxy(ctx: GridContext, path: str | Path) -> Credential:
    path = Path(path)
    if not path.exists():
        raise NotFound(f"no proxy file at {path}; run 'gridctl proxy init' first")
    return Delegation.from_record(decode_value(path.read_bytes())).install(ctx.signer)


def proxy_store(ctx: GridContext, credential: Credential, tag: str, lifetime: float = DEFAULT_PROXY_LIFETIME) -> dict:
    if ctx.scenario.cred_store is None:
        raise ValidationError("services.cred_store", "the grid config declares no credential store")
    store = ctx.resolve(ctx.scenario.cred_store.name)
    delegation = proxy_init(ctx, credential.subject.name, sorted(credential.rights), lifetime, parent=credential)
    return store_proxy(ctx.client(credential), store, delegation, tag)


def proxy_fetch(ctx: GridContext, subject: str, tag: str) -> Delegation:
    if ctx.scenario.cred_store is None:
        raise ValidationError("services.cred_store", "the grid config declares no credential store")
    store = ctx.resolve(ctx.scenario.cred_store.name)
    # fetching is anonymous; any credential will do for the transport side
    client = GridClient(ctx.world.net if ctx.world is not None else ctx.net, client_address(subject), None,
                        ctx.trust(), ctx.signer, ctx.ids, timeout=ctx.timeout)
    return fetch_proxy(client, store, subject, tag)


# -- resource operations --------------------------------------------------------------
def submit(client: GridClient, host: EndpointAddress, executable: str, work_units: float, vo: str = "",
           request_id: str | None = None, stage_from: tuple[str, tuple[str, ...]] | None = None,
           constraints: Mapping[str, Any] | None = None, reservation_id: str | None = None) -> dict:
    job = JobRequest(
        request_id=request_id or client.ids.next_id("job"),
        executable=executable,
        work_units=work_units,
        vo=vo,
        stage_from=stage_from,
        constraints=dict(constraints or {}),
        reservation_id=reservation_id,
    )
    job_id, record = rc.allocate(client, host, job)
    return {"job_id": job_id, "record": record.to_record()}


def status(client: GridClient, host: EndpointAddress, job_id: str) -> dict:
    return rc.job_status(client, host, job_id).to_record()


def wait(ctx: GridContext, client: GridClient, host: EndpointAddress, job_id: str, poll: float = 1.0,
         timeout: float = 3600.0) -> dict:
    """Poll until the job is terminal; returns its final record."""
    give_up = ctx.now() + timeout
    while True:
        record = rc.job_status(client, host, job_id)
        if record.terminal or ctx.now() >= give_up:
            return record.to_record()
        ctx.clock.sleep(poll)


def cancel(client: GridClient, host: EndpointAddress, job_id: str) -> dict:
    return rc.cancel(client, host, job_id).to_record()


def xfer(client: GridClient, source: EndpointAddress, source_path: str, dest: EndpointAddress, dest_path: str,
         *, offset: int = 0, length: int | None = None, streams: int = 1, vo: str = "",
         request_id: str | None = None) -> dict:
    req = TransferRequest(request_id or client.ids.next_id("xfer"), str(source), source_path, str(dest), dest_path,
                          offset, length, streams)
    return rc.transfer(client, req, vo=vo).to_record()


def discover(client: GridClient, index: EndpointAddress, requirements: Mapping[str, Any] | None = None,
             view: str | None = None) -> list[dict]:
    return discover_and_rank(client, index, requirements, view)


def coalloc(ctx: GridContext, client: GridClient, legs: Sequence[Leg], plan_id: str | None = None,
            vo: str = "") -> dict:
    plan_id = plan_id or client.ids.next_id("plan")
    if ctx.scenario.coalloc is not None:
        service = ctx.resolve(ctx.scenario.coalloc.name)
        plan = request_co_reservation(client, service, legs, vo=vo, request_id=plan_id)
    else:
        index = ctx.index_address() if ctx.scenario.index is not None else None
        plan = co_reserve_end_to_end(client, legs, plan_id, vo=vo, index=index)
    return plan.to_record()


def replica_add(client: GridClient, catalog: EndpointAddress, logical: str, storage: EndpointAddress, path: str,
                size: int | None = None) -> dict:
    return replica_register(client, catalog, logical, storage, path, size)


def replica_find(client: GridClient, catalog: EndpointAddress, logical: str) -> list[dict]:
    return replica_locate(client, catalog, logical)


def cap_request(client: GridClient, server: EndpointAddress, vo: str, operations: Sequence[str],
                resource: str = "*", lifetime: float = 3600.0) -> dict:
    return request_capability(client, server, vo, operations, resource, lifetime).to_record()


# -- scenarios ----------------------------------------------------------------------------
def scenario_validate(path: str | Path) -> dict:
    scn = load_scenario(path)
    return {
        "name": scn.name,
        "valid": True,
        "organizations": [o.name for o in scn.organizations],
        "hosts": [h.name for h in scn.hosts()],
        "vos": [v.name for v in scn.vos],
        "workloads": len(scn.workloads),
        "faults": len(scn.faults),
    }


def scenario_run(path: str | Path, transport: str = "sim", seed: int | None = None) -> ScenarioReport:
    scn = load_scenario(path)
    if seed is not None:
        scn = dataclasses.replace(scn, seed=seed)
    return run_scenario(scn, transport)


# -- daemons ------------------------------------------------------------------------------
def pid_path(state_dir: str | Path, name: str) -> Path:
    return Path(state_dir) / "run" / f"{_slug(name)}.pid"


def serve(ctx: GridContext, kind: str, name: str | None = None, until=None) -> GridWorld:
    """Start one configured service over sockets; blocks until ``until()`` is true or a signal arrives."""
    if ctx.transport != "socket" or ctx.keys is None:
        raise ValidationError("--transport", "daemons run only with --transport socket")
    keys = ctx.keys
    keys.ca(create=True)
    world = GridWorld(ctx.scenario, "socket", net=ctx.net, signer=ctx.signer, ca=keys.ca(),
                      credential_for=keys.credential_for(ctx.now()))
    if kind == "host":
        try:
            service = world.host(name) if name else None
        except KeyError:
            raise ValidationError("host", f"no host named {name!r} in the grid config") from None
    elif kind == "index":
        service = world.index
    elif kind == "ca":
        service = world.cas
    elif kind == "coalloc":
        service = world.coalloc
    elif kind == "cred-store":
        service = world.cred_store
    else:
        raise ValidationError("kind", f"unknown daemon kind {kind!r}")
    if service is None:
        raise ValidationError("services", f"the grid config declares no {kind} {name or ''}".strip())
    service.start()
    registrar = getattr(service, "registrar", None)
    if registrar is not None:
        registrar.start()
    label = service.address.name
    pid_file = pid_path(keys.root, label)
    pid_file.parent.mkdir(parents=True, exist_ok=True)
    pid_file.write_text(str(os.getpid()))
    if until is None:
        return world
    try:
        while not until():
            ctx.clock.sleep(0.1)
    finally:
        if registrar is not None:
            registrar.stop()
        service.stop()
        pid_file.unlink(missing_ok=True)
    return world


def stop_daemon(state_dir: str | Path, name: str) -> dict:
    path = pid_path(state_dir, name)
    if not path.exists():
        raise NotFound(f"no running daemon named {name}")
    pid = int(path.read_text().strip())
    try:
        os.kill(pid, signal.SIGTERM)
    except ProcessLookupError:
        path.unlink(missing_ok=True)
        raise NotFound(f"daemon {name} (pid {pid}) is not running") from None
    return {"name": name, "pid": pid, "signal": "TERM"}


__all__ = [
    "GridContext",
    "GridError",
    "KeyStore",
    "cancel",
    "cap_request",
    "client_address",
    "coalloc",
    "discover",
    "issue_identity",
    "load_proxy",
    "open_context",
    "proxy_fetch",
    "proxy_info",
    "proxy_init",
    "proxy_store",
    "replica_add",
    "replica_find",
    "save_proxy",
    "scenario_run",
    "scenario_validate",
    "serve",
    "status",
    "stop_daemon",
    "submit",
    "wait",
    "xfer",
]
