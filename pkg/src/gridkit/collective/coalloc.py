"""Two-phase co-allocation and the co-reservation service layered on it.

Phase one places a tentative hold on every leg in plan order; phase two
confirms them. Any failure releases every leg that might hold something,
including the failing one, whose reserve may have landed even though its
reply never came back. Reservation ids are derived from the plan id, so a
release never depends on having seen the reserve reply. Holds that a
release cannot reach lapse on the host's tentative timeout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

from ..connectivity.auth import Session
from ..connectivity.credentials import Delegation, delegate, verify_chain
from ..connectivity.endpoint import GridClient, Service, require
from ..errors import (
    Aborted,
    AbortedTwice,
    Conflict,
    Denied,
    GridError,
    LegConflict,
    LegUnreachable,
    TransportError,
    error_from_record,
)
from ..ids import derived_id
from ..policy import AccessRequest, PolicyRule, evaluate
from ..resource import client as rc
from ..wire.codec import Envelope
from ..wire.transport import EndpointAddress
from .broker import discover_and_rank

log = logging.getLogger(__name__)

RESERVING, CONFIRMED, ABORTED = "reserving", "confirmed", "aborted"


@dataclass(frozen=True)
class Leg:
    host: str | None
    start: float
    end: float
    amount: int = 1
    requirements: Mapping[str, Any] | None = None  # used when host is None or on re-selection

    def to_record(self) -> dict:
        out: dict[str, Any] = {"start": self.start, "end": self.end, "amount": self.amount}
        if self.host is not None:
            out["host"] = self.host
        if self.requirements is not None:
            out["requirements"] = dict(self.requirements)
        return out

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "Leg":
        return cls(
            record.get("host"),
            float(record["start"]),
            float(record["end"]),
            int(record.get("amount", 1)),
            dict(record["requirements"]) if record.get("requirements") is not None else None,
        )


@dataclass
class CoAllocationPlan:
    plan_id: str
    legs: list[Leg]
    state: str = RESERVING
    acquired: dict[int, str] = field(default_factory=dict)
    confirmed: list[int] = field(default_factory=list)
    failed_leg: int | None = None
    error: GridError | None = None

    def reservation_id(self, index: int) -> str:
        return derived_id("resv", self.plan_id, str(index))

    def to_record(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "legs": [leg.to_record() for leg in self.legs],
            "state": self.state,
            "reservations": [self.reservation_id(i) for i in range(len(self.legs))],
            "confirmed": list(self.confirmed),
            "failed_leg": self.failed_leg,
            "cause": self.error.to_record() if self.error is not None else None,
        }

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "CoAllocationPlan":
        plan = cls(record["plan_id"], [Leg.from_record(r) for r in record["legs"]], record["state"])
        plan.confirmed = list(record.get("confirmed", []))
        plan.acquired = {i: rid for i, rid in enumerate(record.get("reservations", [])) if i in plan.confirmed}
        plan.failed_leg = record.get("failed_leg")
        plan.error = error_from_record(record["cause"]) if record.get("cause") else None
        return plan


def _leg_error(index: int, leg: Leg, exc: GridError) -> GridError:
    if isinstance(exc, Conflict):
        return LegConflict(f"leg {index} on {leg.host}: {exc.message}", leg=index, host=leg.host,
                           earliest_fit=exc.detail.get("earliest_fit"))
    if isinstance(exc, TransportError):
        return LegUnreachable(f"leg {index} on {leg.host}: {exc.message}", leg=index, host=leg.host, cause=exc.code)
    return Aborted(f"leg {index} on {leg.host}: {exc.message}", leg=index, host=leg.host, cause=exc.code)


def _release_all(client: GridClient, plan: CoAllocationPlan, upto: int) -> None:
    for i in range(upto + 1):
        leg = plan.legs[i]
        try:
            rc.release(client, EndpointAddress.parse(leg.host), plan.reservation_id(i),
                       request_id=f"{plan.plan_id}/release/{i}")
        except GridError as exc:
            log.info("plan %s: release of leg %d failed (%s); hold will lapse", plan.plan_id, i, exc)
        plan.acquired.pop(i, None)


def coallocate(
    client: GridClient,
    legs: Sequence[Leg],
    plan_id: str,
    vo: str = "",
    capability=None,
) -> CoAllocationPlan:
    """All-or-nothing reservation of every leg. Never raises for leg failures."""
    plan = CoAllocationPlan(plan_id, list(legs))
    for i, leg in enumerate(plan.legs):
        if leg.host is None:
            raise ValueError(f"leg {i} has no host; resolve it before co-allocating")
    last = -1
    try:
        for i, leg in enumerate(plan.legs):
            last = i
            rc.reserve(
                client, EndpointAddress.parse(leg.host), plan.reservation_id(i), leg.start, leg.end, leg.amount,
                vo=vo, request_id=f"{plan_id}/reserve/{i}", capability=capability,
            )
            plan.acquired[i] = plan.reservation_id(i)
        for i, leg in enumerate(plan.legs):
            last = len(plan.legs) - 1
            rc.confirm(client, EndpointAddress.parse(leg.host), plan.reservation_id(i),
                       request_id=f"{plan_id}/confirm/{i}")
            plan.confirmed.append(i)
    except GridError as exc:
        failing = len(plan.acquired) if len(plan.acquired) < len(plan.legs) else len(plan.confirmed)
        plan.failed_leg = failing
        plan.error = _leg_error(failing, plan.legs[failing], exc)
        plan.state = ABORTED
        plan.confirmed = []
        _release_all(client, plan, last)
        return plan
    plan.state = CONFIRMED
    return plan


def release_plan(client: GridClient, plan: CoAllocationPlan) -> CoAllocationPlan:
    _release_all(client, plan, len(plan.legs) - 1)
    plan.state = ABORTED
    plan.confirmed = []
    return plan


def resolve_legs(
    client: GridClient,
    legs: Sequence[Leg],
    index: EndpointAddress | None,
    avoid: Iterable[str] = (),
) -> list[Leg]:
    """Pick hosts for legs given only requirements, skipping ``avoid``."""
    avoid = set(avoid)
    taken: set[str] = set()
    out = []
    for i, leg in enumerate(legs):
        if leg.host is not None and leg.host not in avoid:
            out.append(leg)
            taken.add(leg.host)
            continue
        if leg.requirements is None or index is None:
            out.append(leg)
            continue
        reqs = dict(leg.requirements)
        reqs.setdefault("type", "compute")
        candidates = [
            r for r in discover_and_rank(client, index, reqs)
            if r["endpoint"] not in avoid and r["endpoint"] not in taken
        ]
        if not candidates:
            out.append(leg)
            continue
        out.append(replace(leg, host=candidates[0]["endpoint"]))
        taken.add(candidates[0]["endpoint"])
    return out


def co_reserve_end_to_end(
    client: GridClient,
    legs: Sequence[Leg],
    plan_id: str,
    *,
    policy: Sequence[PolicyRule] | None = None,
    memberships: Iterable[str] = (),
    vo: str = "",
    index: EndpointAddress | None = None,
    decision_log: list | None = None,
    service_name: str = "co-reservation",
    rights: Iterable[str] | None = None,
    capability=None,
) -> CoAllocationPlan:
    """Co-allocate with a policy check up front and one retry after re-querying the index."""
    entries = decision_log if decision_log is not None else []
    principal = client.identity.name
    if policy is not None:
        decision = evaluate(
            AccessRequest(
                principal,
                frozenset(rights if rights is not None else client.credential.rights),
                vo,
                "compute:submit",
                service_name,
                {"legs": len(legs)},
                frozenset(memberships),
            ),
            policy,
        )
        if not decision.allowed:
            entries.append({"plan_id": plan_id, "attempt": 0, "principal": principal, "state": "denied",
                            "reason": decision.reason, "t": client.clock.now()})
            raise Denied(f"co-reservation refused: {decision.reason}", rule=decision.rule)

    avoid: set[str] = set()
    first_error: GridError | None = None
    for attempt in (1, 2):
        resolved = resolve_legs(client, legs, index, avoid if attempt == 2 else ())
        missing = [i for i, leg in enumerate(resolved) if leg.host is None]
        attempt_id = plan_id if attempt == 1 else f"{plan_id}#2"
        if missing:
            plan = CoAllocationPlan(attempt_id, resolved, ABORTED, failed_leg=missing[0],
                                    error=Aborted(f"no candidate host for leg {missing[0]}", leg=missing[0]))
        else:
            plan = coallocate(client, resolved, attempt_id, vo=vo, capability=capability)
        entries.append(
            {
                "plan_id": attempt_id,
                "attempt": attempt,
                "principal": principal,
                "state": plan.state,
                "legs": [leg.host for leg in plan.legs],
                "cause": plan.error.to_record() if plan.error is not None else None,
                "t": client.clock.now(),
            }
        )
        if plan.state == CONFIRMED:
            return plan
        assert plan.error is not None
        if plan.error.detail.get("cause") == "Denied":
            raise Denied(f"co-reservation refused by a resource: {plan.error.message}", leg=plan.failed_leg)
        if first_error is None:
            first_error = plan.error
        if plan.failed_leg is not None and plan.legs[plan.failed_leg].host is not None:
            if legs[plan.failed_leg].requirements is not None:
                avoid.add(plan.legs[plan.failed_leg].host)
    raise AbortedTwice(
        f"both attempts aborted: {first_error.message}; {plan.error.message}",
        first=first_error.to_record(),
        second=plan.error.to_record(),
    )


class CoReservationService(Service):
    """Runs co_reserve_end_to_end for clients that delegate to it."""

    kind = "coalloc"

    def __init__(self, *args, policy: Sequence[PolicyRule] = (), rosters: Mapping[str, Iterable[str]] | None = None,
                 index: EndpointAddress | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.policy = list(policy)
        self.rosters = {vo: frozenset(names) for vo, names in (rosters or {}).items()}
        self.index = index
        self.decision_log: list[dict] = []
        self.plans: dict[str, CoAllocationPlan] = {}
        self.route("coalloc", "RESERVE", self._reserve)
        self.route("coalloc", "RELEASE", self._release)

    def _act_as(self, delegation_record, session: Session) -> GridClient:
        proxy = Delegation.from_record(delegation_record).install(self.signer)
        subject, _ = verify_chain(proxy, self.trust, self.clock.now(), self.signer)
        if subject.name != session.peer.name:
            raise Denied("delegated credential does not belong to the requester")
        return GridClient(self.transport, self.address, proxy, self.trust, self.signer, self.ids)

    def _reserve(self, env: Envelope, session: Session) -> tuple[str, dict]:
        legs_record, delegation = require(env.payload, "legs", "delegation")
        vo = env.payload.get("vo", "")
        client = self._act_as(delegation, session)
        member_of = [v for v, names in self.rosters.items() if session.peer.name in names]
        plan_id = derived_id("plan", session.peer.name, env.request_id)
        plan = co_reserve_end_to_end(
            client,
            [Leg.from_record(r) for r in legs_record],
            plan_id,
            policy=self.policy,
            memberships=member_of,
            vo=vo,
            index=self.index,
            decision_log=self.decision_log,
            service_name=self.address.name,
            rights=session.peer_rights,
        )
        self.plans[plan.plan_id] = plan
        return "CONFIRMED", {"plan": plan.to_record()}

    def _release(self, env: Envelope, session: Session) -> tuple[str, dict]:
        plan_id, delegation = require(env.payload, "plan_id", "delegation")
        plan = self.plans.get(plan_id)
        if plan is None:
            return "RELEASED", {"plan_id": plan_id, "known": False}
        client = self._act_as(delegation, session)
        release_plan(client, plan)
        return "RELEASED", {"plan_id": plan_id, "known": True}


def request_co_reservation(client: GridClient, service: EndpointAddress, legs: Sequence[Leg], vo: str = "",
                           request_id: str | None = None, timeout: float = 30.0) -> CoAllocationPlan:
    delegation = delegate(client.credential, ["*"], rc.DELEGATION_LIFETIME, client.signer, client.clock.now())
    reply = client.call(
        service,
        "coalloc",
        "RESERVE",
        {"legs": [leg.to_record() for leg in legs], "vo": vo, "delegation": delegation.to_record()},
        request_id=request_id,
        timeout=timeout,
    )
    return CoAllocationPlan.from_record(reply.payload["plan"])
