"""Fault schedules: host crashes and restarts, partitions and heals."""

from __future__ import annotations

import logging

from .scenario import FaultEvent

log = logging.getLogger(__name__)


class FaultInjector:
    """Fires timed faults from the clock and progress faults from workload callbacks."""

    def __init__(self, world, events: list[FaultEvent]):
        self.world = world
        self.events = list(events)
        self.fired: list[dict] = []
        self._done: set[int] = set()
        self._handles = []

    def arm(self) -> None:
        for i, event in enumerate(self.events):
            if event.time is not None:
                when = self.world.t0 + event.time
                self._handles.append(self.world.clock.call_at(when, lambda i=i: self._fire(i)))

    def disarm(self) -> None:
        for handle in self._handles:
            handle.cancel()
        self._handles.clear()

    def on_progress(self, fraction: float) -> None:
        for i, event in enumerate(self.events):
            if event.at_progress is not None and i not in self._done and fraction >= event.at_progress:
                self._fire(i)

    def pending(self) -> int:
        return len(self.events) - len(self._done)

    def _fire(self, i: int) -> None:
        if i in self._done:
            return
        self._done.add(i)
        event = self.events[i]
        apply(self.world, event)
        self.fired.append({**event.to_record(), "fired_at": self.world.now()})
        log.info("fault %s %s at %.3f", event.kind, event.target, self.world.now())


def apply(world, event: FaultEvent) -> None:
    if event.kind == "host-crash":
        world.crash(event.target)
    elif event.kind == "host-restart":
        world.restart(event.target)
    elif event.kind == "partition":
        world.partition(*event.target)
    elif event.kind == "heal":
        world.heal(*event.target)
    else:
        raise ValueError(f"unknown fault kind {event.kind!r}")


def inject(world, events: list[FaultEvent]) -> FaultInjector:
    """Schedule ``events`` against a running world and return the injector."""
    injector = FaultInjector(world, events)
    injector.arm()
    return injector
