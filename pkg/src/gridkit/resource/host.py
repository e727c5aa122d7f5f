"""The resource host: one endpoint speaking info, mgmt and data for its fabric.

Every sharing operation runs the same pipeline before it touches the
fabric: re-verify the caller's chain, map it to a local account (or accept
a community capability), then evaluate the owner's policy. Failures come
back as structured errors naming the stage that refused.
"""

from __future__ import annotations

import logging
from typing import Any, Iterable, Mapping

from ..connectivity.auth import Session
from ..connectivity.capability import Capability, capability_problem
from ..connectivity.credentials import (
    Delegation,
    GridMap,
    TrustStore,
    has_right,
    intersect_rights,
    map_to_local,
    verify_chain,
)
from ..connectivity.endpoint import GridClient, Service, require
from ..errors import (
    AuthFailed,
    Denied,
    DestDenied,
    Expired,
    GridError,
    Malformed,
    NoMapping,
    NotFound,
    NotOwner,
    PartialFailure,
    ResourceSaturated,
    SourceDenied,
    StagingFailed,
    TransportError,
    UnknownJob,
    UnknownOperation,
    UnknownReservation,
    UntrustedRoot,
)
from ..fabric import (
    CONFIRMED,
    CatalogResource,
    ComputeResource,
    ResourceDescriptor,
    SlotCalendar,
    StorageResource,
    matches,
)
from ..ids import IdSource, derived_id
from ..policy import AccessRequest, PolicyRule, evaluate, policy_summary
from ..wire.codec import Envelope
from ..wire.transport import EndpointAddress, Transport
from .types import JobRecord, JobRequest, TransferReport, TransferRequest, chunk_ranges

log = logging.getLogger(__name__)

DEFAULT_QUEUE_LIMIT = 1000
_REFUSALS = (Denied, NoMapping, AuthFailed, Expired, UntrustedRoot)

_TASK_TO_JOB = {"queued": "queued", "running": "running", "done": "done", "failed": "failed", "cancelled": "cancelled"}


class ResourceHost(Service):
    def __init__(
        self,
        address: EndpointAddress,
        credential,
        trust: TrustStore,
        signer,
        transport: Transport,
        ids: IdSource,
        *,
        compute: ComputeResource | None = None,
        storage: StorageResource | None = None,
        calendar: SlotCalendar | None = None,
        catalog: CatalogResource | None = None,
        gridmap: GridMap | None = None,
        policy: Iterable[PolicyRule] = (),
        rosters: Mapping[str, Iterable[str]] | None = None,
        community_trust: TrustStore | None = None,
        trust_community_ca: bool = False,
        community_account: str = "community",
        queue_limit: int = DEFAULT_QUEUE_LIMIT,
        tags: Iterable[str] = (),
        client_timeout: float = 2.0,
    ):
        super().__init__(address, credential, trust, signer, transport, ids)
        self.kind = address.service_kind
        self.name = address.name
        self.org = address.org
        self.compute = compute
        self.storage = storage
        self.calendar = calendar
        self.catalog = catalog
        self.gridmap = gridmap or GridMap()
        self.policy = list(policy)
        self.rosters = {vo: frozenset(names) for vo, names in (rosters or {}).items()}
        self.community_trust = community_trust or TrustStore({})
        self.trust_community_ca = trust_community_ca
        self.community_account = community_account
        self.queue_limit = queue_limit
        self.tags = tuple(sorted(set(tags)))
        self.client_timeout = client_timeout
        self.jobs: dict[str, JobRecord] = {}
        self._by_request: dict[tuple[str, str], str] = {}
        self._incoming: dict[tuple[str, str], dict] = {}
        self._write_ok: set[tuple[str, str]] = set()
        self._outbound: dict[str, GridClient] = {}  # by delegated key handle
        self.decisions: list[dict] = []
        self.registrar = None

        self.route("info", "QUERY", self._query)
        self.route("info", "UPDATE", self._update)
        for mtype, fn in (
            ("ALLOCATE", self._allocate),
            ("STATUS", self._status),
            ("CANCEL", self._cancel),
            ("RESERVE", self._reserve),
            ("CONFIRM", self._confirm),
            ("RELEASE", self._release),
        ):
            self.route("mgmt", mtype, fn)
        for mtype, fn in (
            ("GET", self._get),
            ("PUT", self._put),
            ("XFER", self._xfer),
            ("CHUNK", self._chunk),
            ("DONE", self._done),
        ):
            self.route("data", mtype, fn)

    # -- enquiry ---------------------------------------------------------------
    def describe(self) -> ResourceDescriptor:
        if self.compute is not None:
            desc = self.compute.enquire()
            if self.storage is not None:
                desc = desc.with_(free_bytes=self.storage.free_bytes)
        elif self.storage is not None:
            desc = self.storage.enquire()
        elif self.catalog is not None:
            desc = self.catalog.enquire()
        else:
            desc = ResourceDescriptor(self.name, self.org, "service", 0)
        return desc.with_(
            name=self.name,
            org=self.org,
            endpoint=str(self.address),
            tags=tuple(sorted(set(desc.tags) | set(self.tags))),
            policy=policy_summary(self.policy),
        )

    # -- the policy application point ------------------------------------------
    def memberships(self, principal: str) -> frozenset[str]:
        return frozenset(vo for vo, names in self.rosters.items() if principal in names)

    def _log(self, request_id: str, principal: str, vo: str, operation: str, effect: str, rule, reason: str, stage: str):
        self.decisions.append(
            {
                "t": self.clock.now(),
                "host": self.name,
                "request_id": request_id,
                "principal": principal,
                "vo": vo,
                "operation": operation,
                "effect": effect,
                "rule": rule,
                "reason": reason,
                "stage": stage,
            }
        )

    def authorize(
        self,
        session: Session,
        operation: str,
        *,
        vo: str = "",
        context: Mapping[str, Any] | None = None,
        capability: Mapping | None = None,
        request_id: str = "",
    ) -> str:
        """Run verify, map and policy for one operation; return the local account."""
        principal = session.peer.name
        now = self.clock.now()
        try:
            subject, rights = verify_chain(session.peer_chain, self.trust, now, self.signer)
        except GridError as exc:
            exc.stage = "verify"
            self._log(request_id, principal, vo, operation, "deny", None, str(exc), "verify")
            raise
        if subject.name != principal:
            self._log(request_id, principal, vo, operation, "deny", None, "session subject changed", "verify")
            raise AuthFailed("session subject does not match chain", stage="verify")

        if capability is not None:
            cap = Capability.from_record(dict(capability))
            problem = capability_problem(cap, self.community_trust, now, self.signer, self.name, principal)
            if problem is not None:
                self._log(request_id, principal, vo, operation, "deny", None, f"capability: {problem}", "capability")
                raise Denied(f"capability rejected: {problem}", stage="capability")
            rights = intersect_rights(rights, cap.operations)
            vo = vo or cap.vo
        try:
            if capability is not None and self.trust_community_ca:
                account = self.community_account
            else:
                account = map_to_local(principal, self.gridmap)
        except NoMapping as exc:
            self._log(request_id, principal, vo, operation, "deny", None, str(exc), "mapping")
            raise

        ctx: dict[str, Any] = {"time_of_day": int(now % 86400), "certified": "certified" in self.describe().tags}
        ctx.update(context or {})
        decision = evaluate(
            AccessRequest(principal, frozenset(rights), vo, operation, self.name, ctx, self.memberships(principal)),
            self.policy,
        )
        self._log(request_id, principal, vo, operation, decision.effect, decision.rule, decision.reason, "policy")
        if not decision.allowed:
            raise Denied(
                f"{operation} on {self.name}: {decision.reason}",
                rule=decision.rule,
                diagnostics=list(decision.diagnostics),
            )
        return account

    # -- info ------------------------------------------------------------------
    def _query(self, env: Envelope, session: Session) -> tuple[str, dict]:
        target = env.payload.get("target", "resource")
        if target == "stat":
            (path,) = require(env.payload, "path")
            self.authorize(session, "storage:read", vo=env.payload.get("vo", ""), request_id=env.request_id)
            if self.storage is None:
                raise NotFound(f"{self.name} has no storage")
            return "RESULT", {"records": [{"path": path, "size": self.storage.stat(path)}]}
        if target == "catalog":
            (table,) = require(env.payload, "table")
            self.authorize(session, "info:query", vo=env.payload.get("vo", ""), request_id=env.request_id)
            catalog = self._need_catalog()
            return "RESULT", {"records": catalog.query(str(table), env.payload.get("key"), env.payload.get("filter"))}
        if target != "resource":
            raise UnknownOperation(f"unknown query target {target!r}")
        self.authorize(session, "info:query", vo=env.payload.get("vo", ""), request_id=env.request_id)
        record = self.describe().to_record()
        records = [record] if matches(record, env.payload.get("filter")) else []
        return "RESULT", {"records": records}

    def _need_catalog(self) -> CatalogResource:
        if self.catalog is None:
            raise UnknownOperation(f"{self.name} has no catalog")
        return self.catalog

    def _update(self, env: Envelope, session: Session) -> tuple[str, dict]:
        catalog = self._need_catalog()
        table, key, record = require(env.payload, "table", "key", "record")
        self.authorize(session, "catalog:update", vo=env.payload.get("vo", ""), request_id=env.request_id)
        catalog.update(str(table), str(key), record)
        return "ACK", {"table": table, "key": key}

    # -- mgmt: jobs ------------------------------------------------------------
    def _sync(self, record: JobRecord) -> JobRecord:
        if record.terminal or record.task_id is None or self.compute is None:
            return record
        task = self.compute.tasks.get(record.task_id)
        if task is None:
            return record
        for state, at in task.transitions:
            job_state = _TASK_TO_JOB[state]
            if job_state not in [s for s, _ in record.transitions]:
                record.move(job_state, at)
        if task.output:
            record.output = task.output
        if record.terminal:
            record.exit = {"status": record.state, "reason": task.reason} if task.reason else {"status": record.state}
        return record

    def _allocate(self, env: Envelope, session: Session) -> tuple[str, dict]:
        (job_record,) = require(env.payload, "job")
        job = JobRequest.from_record(job_record)
        owner = session.peer.name
        key = (owner, job.request_id)
        if key in self._by_request:
            record = self._sync(self.jobs[self._by_request[key]])
            return "ALLOCATED", {"job_id": record.job_id, "record": record.to_record()}
        if self.compute is None:
            raise UnknownOperation(f"{self.name} has no compute resource")
        context = dict(job.constraints)
        context["duration"] = job.work_units / self.compute.slot_speed
        account = self.authorize(
            session,
            "compute:submit",
            vo=job.vo,
            context=context,
            capability=env.payload.get("capability"),
            request_id=job.request_id,
        )
        if len(self.compute.queue) >= self.queue_limit:
            raise ResourceSaturated(f"{self.name} queue holds {len(self.compute.queue)} jobs")
        if job.reservation_id is not None:
            hold = next((h for h in self._holds() if h.reservation_id == job.reservation_id), None)
            if hold is None or hold.state != CONFIRMED:
                raise UnknownReservation(f"no confirmed reservation {job.reservation_id}", stage="admission")

        job_id = derived_id("job", self.name, owner, job.request_id)
        record = JobRecord(
            job_id, job.request_id, owner, account, self.name, job.vo, job.work_units,
            reservation_id=job.reservation_id,
        )
        record.move("staged", self.clock.now())
        self.jobs[job_id] = record
        self._by_request[key] = job_id
        try:
            if job.stage_from is not None:
                self._stage(job, env.payload.get("delegation"))
            record.task_id = self.compute.start_task(job.work_units, job.executable, job.inputs, owner=owner)
        except GridError as exc:
            record.move("failed", self.clock.now())
            record.exit = {"status": "failed", "reason": f"{exc.code}: {exc.message}"}
            if isinstance(exc, StagingFailed):
                raise
            if isinstance(exc, NotFound):
                raise StagingFailed(f"executable {job.executable} is not staged", cause=exc.code) from None
            raise
        record.move("queued", self.clock.now())
        self._sync(record)
        return "ALLOCATED", {"job_id": job_id, "record": record.to_record()}

    def _stage(self, job: JobRequest, delegation_record) -> None:
        """Pull input files from the staging source, acting as the requester."""
        if self.storage is None:
            raise StagingFailed(f"{self.name} has no local store", cause="NoStore")
        if delegation_record is None:
            raise StagingFailed("staging needs a delegated credential", cause="NoDelegation")
        endpoint, paths = job.stage_from
        try:
            proxy = Delegation.from_record(delegation_record).install(self.signer)
            client = self._client_as(proxy)
            source = EndpointAddress.parse(endpoint)
            for path in paths:
                reply = client.call(source, "data", "GET", {"path": path, "vo": job.vo})
                self.storage.put_file(path, reply.payload["data"])
        except GridError as exc:
            raise StagingFailed(f"staging {paths} from {endpoint}: {exc.message}", cause=exc.code) from None
        except ValueError as exc:
            raise StagingFailed(str(exc), cause="Malformed") from None

    def _client_as(self, credential) -> GridClient:
        """Client acting under a delegated credential; one per credential so sessions carry over."""
        now = self.clock.now()
        for handle in [h for h, c in self._outbound.items() if c.credential.not_after < now]:
            del self._outbound[handle]
        client = self._outbound.get(credential.key_handle)
        if client is None:
            client = GridClient(
                self.transport, self.address, credential, self.trust, self.signer, self.ids, timeout=self.client_timeout
            )
            self._outbound[credential.key_handle] = client
        return client

    def _owned(self, env: Envelope, session: Session) -> JobRecord:
        (job_id,) = require(env.payload, "job_id")
        record = self.jobs.get(str(job_id))
        if record is None:
            raise UnknownJob(str(job_id))
        if record.owner != session.peer.name and not has_right(session.peer_rights, "compute:admin"):
            raise NotOwner(f"{session.peer.name} does not own {job_id}")
        return self._sync(record)

    def _status(self, env: Envelope, session: Session) -> tuple[str, dict]:
        return "RECORD", {"record": self._owned(env, session).to_record()}

    def _cancel(self, env: Envelope, session: Session) -> tuple[str, dict]:
        record = self._owned(env, session)
        if not record.terminal:
            if record.task_id is not None and self.compute is not None:
                self.compute.control_task(record.task_id, "cancel")
                self._sync(record)
            if not record.terminal:
                record.move("cancelled", self.clock.now())
                record.exit = {"status": "cancelled"}
        return "RECORD", {"record": record.to_record()}

    # -- mgmt: advance reservation ---------------------------------------------
    def _holds(self):
        return self.calendar.holds() if self.calendar is not None else []

    def _need_calendar(self) -> SlotCalendar:
        if self.calendar is None:
            raise UnknownOperation(f"{self.name} takes no reservations")
        return self.calendar

    def _reserve(self, env: Envelope, session: Session) -> tuple[str, dict]:
        calendar = self._need_calendar()
        rid, start, end, amount = require(env.payload, "reservation_id", "start", "end", "amount")
        if not start < end or amount < 1:
            raise Malformed("reservation needs start < end and amount >= 1")
        self.authorize(
            session,
            "compute:submit",
            vo=env.payload.get("vo", ""),
            context={"duration": end - start},
            capability=env.payload.get("capability"),
            request_id=env.request_id,
        )
        hold = calendar.reserve(start, end, amount, session.peer.name, reservation_id=str(rid))
        return "TENTATIVE", {"reservation": hold.to_record()}

    def _confirm(self, env: Envelope, session: Session) -> tuple[str, dict]:
        calendar = self._need_calendar()
        (rid,) = require(env.payload, "reservation_id")
        hold = next((h for h in calendar.holds() if h.reservation_id == rid), None)
        if hold is not None and hold.holder != session.peer.name:
            raise NotOwner(f"{rid} is held by {hold.holder}")
        return "CONFIRMED", {"reservation": calendar.confirm(str(rid)).to_record()}

    def _release(self, env: Envelope, session: Session) -> tuple[str, dict]:
        calendar = self._need_calendar()
        (rid,) = require(env.payload, "reservation_id")
        hold = next((h for h in calendar.holds() if h.reservation_id == rid), None)
        if hold is not None and hold.holder != session.peer.name:
            raise NotOwner(f"{rid} is held by {hold.holder}")
        try:
            calendar.release(str(rid))
            known = hold is not None
        except UnknownReservation:
            calendar.tombstone(str(rid))
            known = False
        return "RELEASED", {"reservation_id": rid, "known": known}

    # -- data ------------------------------------------------------------------
    def _need_storage(self) -> StorageResource:
        if self.storage is None:
            raise UnknownOperation(f"{self.name} has no storage")
        return self.storage

    def _get(self, env: Envelope, session: Session) -> tuple[str, dict]:
        storage = self._need_storage()
        (path,) = require(env.payload, "path")
        self.authorize(session, "storage:read", vo=env.payload.get("vo", ""), request_id=env.request_id)
        offset = int(env.payload.get("offset", 0))
        length = env.payload.get("length")
        data = storage.read_range(path, offset, length)
        return "DATA", {"data": data, "size": storage.stat(path)}

    def _put(self, env: Envelope, session: Session) -> tuple[str, dict]:
        storage = self._need_storage()
        path, data = require(env.payload, "path", "data")
        self.authorize(session, "storage:write", vo=env.payload.get("vo", ""), request_id=env.request_id)
        storage.put_file(path, bytes(data))
        return "ACK", {"path": path, "size": len(data)}

    def _xfer(self, env: Envelope, session: Session) -> tuple[str, dict]:
        """Source side of a third-party transfer: push chunks straight to the destination."""
        storage = self._need_storage()
        req_record, delegation_record = require(env.payload, "transfer", "delegation")
        req = TransferRequest.from_record(req_record)
        vo = env.payload.get("vo", "")
        started = self.clock.now()
        try:
            self.authorize(session, "storage:read", vo=vo, request_id=req.request_id)
        except _REFUSALS as exc:
            raise SourceDenied(f"source refused: {exc.message}", cause=exc.code) from None
        data = storage.read_range(req.source_path, req.offset, req.length)
        proxy = Delegation.from_record(delegation_record).install(self.signer)
        if proxy.root.subject.name != session.peer.name:
            raise SourceDenied("delegated credential belongs to someone else", cause="AuthFailed")
        client = self._client_as(proxy)
        dest = EndpointAddress.parse(req.destination)
        transfer_id = derived_id("xfer", session.peer.name, req.request_id)
        pieces = chunk_ranges(0, len(data), req.streams)
        calls = [
            (
                "CHUNK",
                {"transfer": transfer_id, "path": req.destination_path, "offset": off, "data": data[off:off + size],
                 "vo": vo},
                f"{transfer_id}/{i}",
            )
            for i, (off, size) in enumerate(pieces)
        ]
        completed = 0
        try:
            results = client.call_many(dest, "data", calls) if calls else []
            failure: GridError | None = None
            for outcome in results:
                if isinstance(outcome, GridError):
                    failure = failure or outcome
                else:
                    completed += 1
            if failure is not None:
                raise failure
            client.call(
                dest,
                "data",
                "DONE",
                {"transfer": transfer_id, "path": req.destination_path, "size": len(data), "vo": vo},
                request_id=f"{transfer_id}/done",
            )
        except _REFUSALS as exc:
            raise DestDenied(f"destination refused: {exc.message}", cause=exc.code) from None
        except TransportError as exc:
            raise PartialFailure(
                f"{completed} of {len(pieces)} chunks delivered: {exc.message}",
                chunks_completed=completed,
                cause=exc.code,
            ) from None
        report = TransferReport(len(data), len(pieces), self.clock.now() - started)
        return "DONE", report.to_record()

    def _write_allowed(self, env: Envelope, session: Session, transfer_id: str) -> None:
        key = (session.peer.name, transfer_id)
        if key not in self._write_ok:
            self.authorize(session, "storage:write", vo=env.payload.get("vo", ""), request_id=transfer_id)
            self._write_ok.add(key)

    def _chunk(self, env: Envelope, session: Session) -> tuple[str, dict]:
        self._need_storage()
        transfer_id, path, offset, data = require(env.payload, "transfer", "path", "offset", "data")
        self._write_allowed(env, session, transfer_id)
        buf = self._incoming.setdefault((session.peer.name, transfer_id), {"path": path, "chunks": {}})
        buf["chunks"][int(offset)] = bytes(data)
        return "ACK", {"offset": offset, "size": len(data)}

    def _done(self, env: Envelope, session: Session) -> tuple[str, dict]:
        storage = self._need_storage()
        transfer_id, path, size = require(env.payload, "transfer", "path", "size")
        self._write_allowed(env, session, transfer_id)
        buf = self._incoming.pop((session.peer.name, transfer_id), {"path": path, "chunks": {}})
        assembled = bytearray()
        for offset in sorted(buf["chunks"]):
            if offset != len(assembled):
                break
            assembled += buf["chunks"][offset]
        if len(assembled) != size:
            raise PartialFailure(
                f"assembled {len(assembled)} of {size} bytes; transfer discarded",
                chunks_completed=len(buf["chunks"]),
            )
        storage.put_file(path, bytes(assembled))
        return "ACK", {"path": path, "size": size}

    # -- lifecycle -------------------------------------------------------------
    def crash(self) -> None:
        """Lose listener, sessions, queue, running tasks and tentative holds."""
        if self.registrar is not None:
            self.registrar.stop()
        super().crash()
        if self.compute is not None:
            self.compute.crash()
        if self.calendar is not None:
            self.calendar.crash()
        self._incoming.clear()
        self._write_ok.clear()
        self._outbound.clear()
        now = self.clock.now()
        for record in self.jobs.values():
            if not record.terminal:
                record.move("failed", now)
                record.exit = {"status": "failed", "reason": "host crash"}

    def restart(self) -> None:
        super().restart()
        if self.registrar is not None:
            self.registrar.start()

    def fabric_events(self) -> list[dict]:
        out: list[dict] = []
        for name, res in (("compute", self.compute), ("storage", self.storage), ("calendar", self.calendar)):
            if res is not None:
                out.extend({"resource": name, **e} for e in res.events)
        return out
