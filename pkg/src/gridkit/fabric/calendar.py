from __future__ import annotations

import threading
from dataclasses import dataclass, replace

from ..errors import Conflict, UnknownReservation

TENTATIVE, CONFIRMED = "tentative", "confirmed"
DEFAULT_HOLD_TIMEOUT = 30.0


@dataclass(frozen=True)
class Reservation:
    reservation_id: str
    resource: str
    start: float
    end: float
    amount: int
    holder: str
    state: str = TENTATIVE
    created_at: float = 0.0

    def overlaps(self, start: float, end: float) -> bool:
        return self.start < end and start < self.end

    def to_record(self) -> dict:
        return {
            "id": self.reservation_id,
            "resource": self.resource,
            "start": self.start,
            "end": self.end,
            "amount": self.amount,
            "holder": self.holder,
            "state": self.state,
        }


def peak_load(holds, start: float, end: float) -> int:
    """Largest total amount held at any instant of [start, end)."""
    live = [h for h in holds if h.overlaps(start, end)]
    points = {start} | {h.start for h in live if h.start > start}
    return max((sum(h.amount for h in live if h.start <= p < h.end) for p in points), default=0)


class SlotCalendar:
    """Advance-reservation slot manager for one resource.

    Tentative holds lapse ``hold_timeout`` seconds after creation unless
    confirmed. Expiry is applied lazily before every operation.
    """

    def __init__(self, resource: str, capacity: int, clock, hold_timeout: float = DEFAULT_HOLD_TIMEOUT):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.resource = resource
        self.capacity = capacity
        self.clock = clock
        self.hold_timeout = hold_timeout
        self._holds: dict[str, Reservation] = {}
        self._released: set[str] = set()
        self._counter = 0
        self._lock = threading.RLock()
        self.events: list[dict] = []

    def _expire(self) -> None:
        now = self.clock.now()
        for rid, hold in list(self._holds.items()):
            if hold.state == TENTATIVE and now >= hold.created_at + self.hold_timeout:
                del self._holds[rid]
                self._released.add(rid)
                self.events.append({"op": "expire", "id": rid, "t": now})

    def holds(self) -> list[Reservation]:
        with self._lock:
            self._expire()
            return sorted(self._holds.values(), key=lambda h: (h.start, h.reservation_id))

    def earliest_fit(self, start: float, end: float, amount: int) -> float | None:
        with self._lock:
            self._expire()
            return self._earliest_fit(start, end, amount)

    def _earliest_fit(self, start: float, end: float, amount: int) -> float | None:
        if amount > self.capacity:
            return None
        duration = end - start
        holds = list(self._holds.values())
        candidates = sorted({start} | {h.end for h in holds if h.end > start})
        for s in candidates:
            if peak_load(holds, s, s + duration) + amount <= self.capacity:
                return s
        return None  # unreachable: after the last hold ends everything fits

    def reserve(self, start: float, end: float, amount: int, holder: str, reservation_id: str | None = None) -> Reservation:
        if not start < end:
            raise ValueError("reservation window needs start < end")
        if amount < 1:
            raise ValueError("amount must be at least 1")
        with self._lock:
            self._expire()
            if reservation_id is not None:
                if reservation_id in self._holds:
                    return self._holds[reservation_id]
                if reservation_id in self._released:
                    raise UnknownReservation(f"{reservation_id} was already released", id=reservation_id)
            if peak_load(self._holds.values(), start, end) + amount > self.capacity:
                fit = self._earliest_fit(start, end, amount)
                raise Conflict(
                    f"{self.resource}: {amount} slots over [{start:g}, {end:g}) exceed capacity {self.capacity}",
                    earliest_fit=fit,
                )
            if reservation_id is None:
                self._counter += 1
                reservation_id = f"{self.resource}-r{self._counter}"
            hold = Reservation(reservation_id, self.resource, start, end, amount, holder, TENTATIVE, self.clock.now())
            self._holds[reservation_id] = hold
            self.events.append({"op": "reserve", "id": reservation_id, "t": self.clock.now()})
            return hold

    def confirm(self, reservation_id: str) -> Reservation:
        with self._lock:
            self._expire()
            hold = self._holds.get(reservation_id)
            if hold is None:
                raise UnknownReservation(reservation_id, id=reservation_id)
            if hold.state != CONFIRMED:
                hold = replace(hold, state=CONFIRMED)
                self._holds[reservation_id] = hold
                self.events.append({"op": "confirm", "id": reservation_id, "t": self.clock.now()})
            return hold

    def release(self, reservation_id: str) -> None:
        """Remove a hold. Releasing an already released hold is a no-op."""
        with self._lock:
            self._expire()
            if self._holds.pop(reservation_id, None) is None:
                if reservation_id in self._released:
                    return
                raise UnknownReservation(reservation_id, id=reservation_id)
            self._released.add(reservation_id)
            self.events.append({"op": "release", "id": reservation_id, "t": self.clock.now()})

    def tombstone(self, reservation_id: str) -> None:
        # a release that arrived before its reserve; the late reserve must not take effect
        with self._lock:
            self._holds.pop(reservation_id, None)
            self._released.add(reservation_id)

    def crash(self) -> list[str]:
        with self._lock:
            lost = [rid for rid, h in self._holds.items() if h.state == TENTATIVE]
            for rid in lost:
                del self._holds[rid]
            return lost

    def load_at(self, t: float) -> int:
        with self._lock:
            return sum(h.amount for h in self._holds.values() if h.start <= t < h.end)
