"""Boots every service a scenario declares, on the simulated network or on sockets."""

from __future__ import annotations

import logging
from typing import Any, Callable, Iterable

from ..collective.cas import CommunityAuthorizationService
from ..collective.coalloc import CoReservationService
from ..collective.index import IndexService
from ..connectivity.credentials import (
    CertificateAuthority,
    Credential,
    GridMap,
    Identity,
    TrustStore,
    create_proxy,
)
from ..connectivity.credstore import CredentialStore
from ..connectivity.endpoint import GridClient, Service
from ..connectivity.signing import DigestSigner, Ed25519Signer, Signer
from ..fabric import CatalogResource, ComputeResource, SlotCalendar, StorageResource
from ..ids import IdSource
from ..policy import rules_from_record
from ..resource.client import Registrar
from ..resource.host import ResourceHost
from ..wire.clock import RealClock, SimClock
from ..wire.transport import EndpointAddress, SimNet
from .scenario import HostSpec, Scenario, ServiceSpec, service_identity

log = logging.getLogger(__name__)

CREDENTIAL_LIFETIME = 365 * 86400.0
SERVICE_RIGHTS = ("*",)


def _directory(scenario: Scenario) -> dict[EndpointAddress, tuple[str, int]]:
    """Socket addresses from the optional ``endpoints`` table of a grid config."""
    out = {}
    for address, where in dict(scenario.raw.get("endpoints", {})).items():
        host, _, port = str(where).rpartition(":")
        out[EndpointAddress.parse(address)] = (host or "127.0.0.1", int(port))
    return out


class GridWorld:
    """Every service of one scenario, wired to one transport and one authority.

    The authority is the only thing the organizations share: each host gets
    its own trust store holding that one anchor, its own gridmap and its
    own policy.
    """

    def __init__(
        self,
        scenario: Scenario,
        transport: str = "sim",
        client_timeout: float = 2.0,
        *,
        net: Any = None,
        signer: Signer | None = None,
        ca: CertificateAuthority | None = None,
        credential_for: Callable[[Identity, Iterable[str]], Credential] | None = None,
    ):
        self.scenario = scenario
        self.mode = transport
        if transport == "sim":
            self.clock: Any = SimClock(scenario.start_time)
            self.net: Any = net or SimNet(scenario.net, self.clock)
            self.signer: Signer = signer or DigestSigner(scenario.seed)
            self.ids = IdSource(scenario.seed)
        elif transport == "socket":
            from ..wire.sockets import SocketTransport

            self.clock = RealClock()
            self.net = net or SocketTransport(_directory(scenario), self.clock)
            self.signer = signer or Ed25519Signer()
            self.ids = IdSource()
        else:
            raise ValueError(f"unknown transport {transport!r}")
        self.clock = self.net.clock
        self.client_timeout = client_timeout
        self.ca = ca or CertificateAuthority.create(scenario.authority, self.signer)
        self._credential_for = credential_for
        self.proxy_inits: dict[str, int] = {}
        self._proxies: dict[str, Credential] = {}
        self._clients: dict[str, GridClient] = {}
        self.started = False

        now = self.clock.now()
        self.t0 = now
        self.deadline = now + scenario.deadline
        self.validity = (now - 60.0, now + CREDENTIAL_LIFETIME)
        self.user_credentials: dict[str, Credential] = {}
        for user in scenario.users():
            self.user_credentials[user.identity] = self.issue(Identity(user.identity, "user"), user.rights)
        self.rosters = {vo.name: list(vo.roster) for vo in scenario.vos}

        self.cas: CommunityAuthorizationService | None = None
        if scenario.cas is not None:
            vos = {vo.name: {"roster": vo.roster, "rights": vo.rights} for vo in scenario.vos}
            self.cas = self._service(CommunityAuthorizationService, scenario.cas, "ca-server", vos=vos)
        community_trust = self.cas.anchor if self.cas is not None else TrustStore({})

        self.index: IndexService | None = None
        if scenario.index is not None:
            opts = scenario.index.options
            self.index = self._service(
                IndexService, scenario.index, "index",
                views=opts.get("views"),
                sweep_period=float(opts.get("sweep_period", 1.0)),
                overload_queue=int(opts.get("overload_queue", 10)),
            )

        self.hosts: dict[str, ResourceHost] = {}
        for spec in scenario.hosts():
            self.hosts[spec.name] = self._host(spec, community_trust)

        self.coalloc: CoReservationService | None = None
        if scenario.coalloc is not None:
            opts = scenario.coalloc.options
            self.coalloc = self._service(
                CoReservationService, scenario.coalloc, "coalloc",
                policy=rules_from_record(opts.get("policy", [{}])),
                rosters=self.rosters,
                index=self.index.address if self.index is not None else None,
            )
        self.cred_store: CredentialStore | None = None
        if scenario.cred_store is not None:
            self.cred_store = self._service(CredentialStore, scenario.cred_store, "cred-store")

    # -- construction ----------------------------------------------------------
    def trust_store(self) -> TrustStore:
        """A fresh copy of the single anchor every party is configured with."""
        return TrustStore.of(self.ca)

    def issue(self, subject: Identity, rights: Iterable[str]) -> Credential:
        if self._credential_for is not None:
            return self._credential_for(subject, rights)
        return self.ca.issue(subject, rights, *self.validity)

    def _service_credential(self, identity: str) -> Credential:
        return self.issue(Identity(identity, "service"), SERVICE_RIGHTS)

    def _service(self, cls, spec: ServiceSpec, kind: str, **kwargs) -> Service:
        address = EndpointAddress(spec.org, kind, spec.name)
        cred = self._service_credential(service_identity(spec.org, spec.name))
        return cls(address, cred, self.trust_store(), self.signer, self.net, self.ids, **kwargs)

    def _host(self, spec: HostSpec, community_trust: TrustStore) -> ResourceHost:
        users = self.scenario.users()
        entries = dict(spec.gridmap) if spec.gridmap is not None else {u.identity: u.name for u in users}
        compute = storage = calendar = catalog = None
        if spec.kind in ("compute", "storage"):
            storage = StorageResource(spec.name, spec.org, spec.storage_bytes, spec.bandwidth_Bps, spec.tags)
            for path, data in sorted(spec.files.items()):
                storage.put_file(path, data)
        if spec.kind == "compute":
            compute = ComputeResource(spec.name, spec.org, spec.slots, self.clock, spec.slot_speed, spec.tags,
                                      sorted(set(entries.values())), store=storage)
            if spec.calendar:
                calendar = SlotCalendar(spec.name, spec.slots, self.clock, spec.hold_timeout)
        if spec.kind == "catalog":
            catalog = CatalogResource(spec.name, spec.org, spec.tags)
        host = ResourceHost(
            spec.address,
            self._service_credential(spec.identity),
            self.trust_store(),
            self.signer,
            self.net,
            self.ids,
            compute=compute,
            storage=storage,
            calendar=calendar,
            catalog=catalog,
            gridmap=GridMap(entries),
            policy=spec.policy,
            rosters=self.rosters,
            community_trust=community_trust,
            trust_community_ca=spec.trust_community_ca,
            community_account=spec.community_account,
            queue_limit=spec.queue_limit,
            tags=spec.tags,
            client_timeout=self.client_timeout,
        )
        if self.index is not None:
            host.registrar = Registrar(host, self.index.address, spec.ttl, spec.refresh_interval)
        return host

    # -- lifecycle -------------------------------------------------------------
    def services(self) -> list[Service]:
        out: list[Service] = []
        for svc in (self.index, self.cas, self.coalloc, self.cred_store):
            if svc is not None:
                out.append(svc)
        out.extend(self.hosts[name] for name in sorted(self.hosts))
        return out

    def start(self) -> None:
        if self.started:
            return
        for svc in self.services():
            svc.start()
        for name in sorted(self.hosts):
            if self.hosts[name].registrar is not None:
                self.hosts[name].registrar.start()
        self.started = True
        if self.mode == "sim":
            # let the initial registrations land
            self.clock.run_until(self._registered, self.clock.now() + 5.0)
        else:
            deadline = self.clock.now() + 5.0
            while not self._registered() and self.clock.now() < deadline:
                self.clock.sleep(0.02)

    def _registered(self) -> bool:
        return all(h.registrar is None or h.registrar.registered for h in self.hosts.values())

    def shutdown(self) -> None:
        """Stop refreshing, let every registration lapse, then stop services."""
        for name in sorted(self.hosts):
            if self.hosts[name].registrar is not None:
                self.hosts[name].registrar.stop()
        if self.index is not None and self.mode == "sim":
            longest = max((h.registrar.ttl for h in self.hosts.values() if h.registrar is not None), default=0.0)
            self.clock.run_until(lambda: not self.index.entries,
                                 self.clock.now() + longest + 2 * self.index.sweep_period)
        for svc in self.services():
            svc.stop()
        self.started = False

    def close(self) -> None:
        if self.started:
            for svc in self.services():
                svc.stop()
            self.started = False
        if self.mode == "socket":
            self.net.close()

    # -- principals --------------------------------------------------------------
    def user_address(self, identity: str) -> EndpointAddress:
        user = self.scenario.user(identity)
        return EndpointAddress(user.org, "client", user.name)

    def proxy_for(self, identity: str) -> Credential:
        """One proxy-init per user per run: the single unlock of the long-term key."""
        user = self.scenario.user(identity)
        proxy = self._proxies.get(user.identity)
        if proxy is None or proxy.not_after <= self.clock.now():
            proxy = create_proxy(self.user_credentials[user.identity], user.proxy_rights, user.proxy_lifetime,
                                 self.signer, self.clock.now())
            self._proxies[user.identity] = proxy
            self.proxy_inits[user.identity] = self.proxy_inits.get(user.identity, 0) + 1
        return proxy

    def client(self, identity: str) -> GridClient:
        user = self.scenario.user(identity)
        existing = self._clients.get(user.identity)
        proxy = self.proxy_for(user.identity)
        if existing is not None and existing.credential is proxy:
            return existing
        client = GridClient(self.net, self.user_address(user.identity), proxy, self.trust_store(), self.signer,
                            self.ids, timeout=self.client_timeout)
        self._clients[user.identity] = client
        return client

    def secret_use(self) -> dict[str, int]:
        """Long-term key unlocks per user identity."""
        return {ident: self.signer.unlock_count(owner=ident) for ident in sorted(self.user_credentials)}

    # -- addressing and faults -------------------------------------------------
    def host(self, name: str) -> ResourceHost:
        for host in self.hosts.values():
            if host.name == name or str(host.address) == name:
                return host
        raise KeyError(name)

    def resolve(self, name: str) -> EndpointAddress:
        """Map a host, service, user or full address to an endpoint address."""
        try:
            return self.host(name).address
        except KeyError:
            pass
        for svc in self.services():
            if svc.address.name == name or str(svc.address) == name:
                return svc.address
        try:
            return self.user_address(name)
        except KeyError:
            pass
        return EndpointAddress.parse(name)

    def crash(self, name: str) -> None:
        self.host(name).crash()

    def restart(self, name: str) -> None:
        self.host(name).restart()

    def partition(self, a: str, b: str) -> None:
        self.net.partition(self.resolve(a), self.resolve(b))

    def heal(self, a: str, b: str) -> None:
        self.net.heal(self.resolve(a), self.resolve(b))

    # -- time --------------------------------------------------------------------
    def now(self) -> float:
        return self.clock.now()

    def sleep(self, duration: float) -> None:
        self.clock.sleep(duration)

    def decisions(self) -> list[dict]:
        out = [d for name in sorted(self.hosts) for d in self.hosts[name].decisions]
        if self.coalloc is not None:
            out.extend({"host": self.coalloc.address.name, **d} for d in self.coalloc.decision_log)
        return out

    def fabric_events(self) -> list[dict]:
        return [{"host": name, **e} for name in sorted(self.hosts) for e in self.hosts[name].fabric_events()]
