"""Client side of the four resource protocols.

Everything here is written against :class:`GridClient` and endpoint
addresses only, so the same calls drive any compute or storage host.
"""

from __future__ import annotations

import logging
from typing import Any, Mapping

from ..connectivity.credentials import Credential
from ..connectivity.endpoint import GridClient
from ..errors import GridError, NotRegistered
from ..fabric.descriptor import ResourceDescriptor
from ..wire.transport import EndpointAddress
from .types import JobRecord, JobRequest, TransferReport, TransferRequest

log = logging.getLogger(__name__)

STAGING_RIGHTS = ("storage:read",)
TRANSFER_RIGHTS = ("storage:write",)
DELEGATION_LIFETIME = 3600.0


# -- grrp --------------------------------------------------------------------
def register(client: GridClient, index: EndpointAddress, descriptor: ResourceDescriptor, ttl: float,
             request_id: str | None = None) -> dict:
    reply = client.call(index, "grrp", "REGISTER", {"descriptor": descriptor.to_record(), "ttl": ttl}, request_id)
    return reply.payload


def refresh(client: GridClient, index: EndpointAddress, descriptor: ResourceDescriptor, ttl: float,
            request_id: str | None = None) -> dict:
    reply = client.call(index, "grrp", "REFRESH", {"descriptor": descriptor.to_record(), "ttl": ttl}, request_id)
    return reply.payload


def unregister(client: GridClient, index: EndpointAddress, name: str, request_id: str | None = None) -> dict:
    return client.call(index, "grrp", "UNREGISTER", {"name": name}, request_id).payload


class Registrar:
    """Keeps one host's registration alive with periodic refreshes."""

    def __init__(self, host, index: EndpointAddress, ttl: float, interval: float | None = None):
        self.host = host
        self.index = index
        self.ttl = ttl
        self.interval = interval if interval is not None else ttl / 2
        self.client = GridClient(host.transport, host.address, host.credential, host.trust, host.signer, host.ids)
        self.registered = False
        self.generation: int | None = None
        self.failures = 0
        self._timer = None
        self._active = False

    def start(self) -> None:
        self._active = True
        self.registered = False
        self.client.forget()
        self._schedule(0.0)

    def stop(self) -> None:
        """Stop refreshing; the index entry then lapses on its own."""
        self._active = False
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def _schedule(self, delay: float) -> None:
        self._timer = self.host.clock.call_later(delay, self._tick)

    def _tick(self) -> None:
        if not self._active:
            return
        try:
            self.beat()
        except GridError as exc:
            self.failures += 1
            log.info("%s: registration with %s failed: %s", self.host.address, self.index, exc)
        if self._active:
            self._schedule(self.interval)

    def beat(self) -> dict:
        desc = self.host.describe()
        if self.registered:
            try:
                out = refresh(self.client, self.index, desc, self.ttl)
            except NotRegistered:
                self.registered = False
                out = register(self.client, self.index, desc, self.ttl)
        else:
            out = register(self.client, self.index, desc, self.ttl)
        self.registered = True
        self.generation = out.get("generation")
        return out


# -- info --------------------------------------------------------------------
def query_info(client: GridClient, host: EndpointAddress, filter: Mapping[str, Any] | None = None,
               vo: str = "") -> list[dict]:
    return client.call(host, "info", "QUERY", {"filter": dict(filter or {}), "vo": vo}).payload["records"]


def stat(client: GridClient, host: EndpointAddress, path: str, vo: str = "") -> int:
    reply = client.call(host, "info", "QUERY", {"target": "stat", "path": path, "vo": vo})
    return int(reply.payload["records"][0]["size"])


# -- mgmt --------------------------------------------------------------------
def staging_delegation(client: GridClient, lifetime: float = DELEGATION_LIFETIME):
    return client.delegation(STAGING_RIGHTS, lifetime)


def allocate(
    client: GridClient,
    host: EndpointAddress,
    job: JobRequest,
    capability=None,
    timeout: float | None = None,
) -> tuple[str, JobRecord]:
    """Submit a job; retries with the same request_id give back the same job id."""
    payload: dict[str, Any] = {"job": job.to_record()}
    if job.stage_from is not None:
        payload["delegation"] = staging_delegation(client).to_record()
    if capability is not None:
        payload["capability"] = capability.to_record()
    reply = client.call(host, "mgmt", "ALLOCATE", payload, request_id=job.request_id, timeout=timeout)
    return reply.payload["job_id"], JobRecord.from_record(reply.payload["record"])


def job_status(client: GridClient, host: EndpointAddress, job_id: str) -> JobRecord:
    return JobRecord.from_record(client.call(host, "mgmt", "STATUS", {"job_id": job_id}).payload["record"])


def cancel(client: GridClient, host: EndpointAddress, job_id: str) -> JobRecord:
    return JobRecord.from_record(client.call(host, "mgmt", "CANCEL", {"job_id": job_id}).payload["record"])


def reserve(client: GridClient, host: EndpointAddress, reservation_id: str, start: float, end: float, amount: int,
            vo: str = "", request_id: str | None = None, capability=None) -> dict:
    payload: dict[str, Any] = {"reservation_id": reservation_id, "start": start, "end": end, "amount": amount, "vo": vo}
    if capability is not None:
        payload["capability"] = capability.to_record()
    return client.call(host, "mgmt", "RESERVE", payload, request_id).payload["reservation"]


def confirm(client: GridClient, host: EndpointAddress, reservation_id: str, request_id: str | None = None) -> dict:
    return client.call(host, "mgmt", "CONFIRM", {"reservation_id": reservation_id}, request_id).payload["reservation"]


def release(client: GridClient, host: EndpointAddress, reservation_id: str, request_id: str | None = None) -> dict:
    return client.call(host, "mgmt", "RELEASE", {"reservation_id": reservation_id}, request_id).payload


# -- data --------------------------------------------------------------------
def put(client: GridClient, host: EndpointAddress, path: str, data: bytes, vo: str = "") -> dict:
    return client.call(host, "data", "PUT", {"path": path, "data": bytes(data), "vo": vo}).payload


def get(client: GridClient, host: EndpointAddress, path: str, offset: int = 0, length: int | None = None,
        vo: str = "") -> bytes:
    payload: dict[str, Any] = {"path": path, "offset": offset, "vo": vo}
    if length is not None:
        payload["length"] = length
    return client.call(host, "data", "GET", payload).payload["data"]


def transfer(
    client: GridClient,
    req: TransferRequest,
    vo: str = "",
    credential: Credential | None = None,
    timeout: float | None = None,
) -> TransferReport:
    """Third-party transfer: only control messages leave this client.

    The source host receives a delegation restricted to storage:write and
    uses it to authenticate to the destination as the requester.
    """
    delegation = client.delegation(TRANSFER_RIGHTS, DELEGATION_LIFETIME, parent=credential)
    reply = client.call(
        EndpointAddress.parse(req.source),
        "data",
        "XFER",
        {"transfer": req.to_record(), "delegation": delegation.to_record(), "vo": vo},
        request_id=req.request_id,
        timeout=timeout,
    )
    return TransferReport.from_record(reply.payload)
