"""Clocks: a discrete-event simulated clock and a wall clock with the same surface."""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable, Protocol


class TimerHandle:
    __slots__ = ("when", "fn", "cancelled", "_timer")

    def __init__(self, when: float, fn: Callable[[], None]):
        self.when = when
        self.fn = fn
        self.cancelled = False
        self._timer: threading.Timer | None = None

    def cancel(self) -> None:
        self.cancelled = True
        if self._timer is not None:
            self._timer.cancel()


class Clock(Protocol):
    def now(self) -> float: ...

    def call_at(self, when: float, fn: Callable[[], None]) -> TimerHandle: ...

    def call_later(self, delay: float, fn: Callable[[], None]) -> TimerHandle: ...

    def sleep(self, duration: float) -> None: ...


class SimClock:
    """Single-threaded event loop; time jumps to the next pending event.

    ``run_until`` is re-entrant: a callback may itself block on a nested
    ``run_until`` (a service making an outbound request while handling one).
    Events with equal times fire in scheduling order.
    """

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._heap: list[tuple[float, int, TimerHandle]] = []
        self._seq = itertools.count()

    def now(self) -> float:
        return self._now

    def call_at(self, when: float, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(max(float(when), self._now), fn)
        heapq.heappush(self._heap, (handle.when, next(self._seq), handle))
        return handle

    def call_later(self, delay: float, fn: Callable[[], None]) -> TimerHandle:
        return self.call_at(self._now + delay, fn)

    def pending(self) -> int:
        return sum(1 for _, _, h in self._heap if not h.cancelled)

    def run_until(
        self,
        predicate: Callable[[], bool] | None = None,
        deadline: float | None = None,
    ) -> bool:
        if predicate is None and deadline is None:
            raise ValueError("run_until needs a predicate or a deadline")
        while True:
            if predicate is not None and predicate():
                return True
            if not self._heap:
                break
            when, _, handle = self._heap[0]
            if deadline is not None and when > deadline:
                break
            heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            if when > self._now:
                self._now = when
            handle.fn()
        if deadline is not None and deadline > self._now:
            self._now = deadline
        return predicate is not None and predicate()

    def advance(self, to: float) -> None:
        self.run_until(deadline=to)

    def sleep(self, duration: float) -> None:
        self.run_until(deadline=self._now + duration)


class RealClock:
    """Wall-clock time (epoch seconds) with thread-backed timers."""

    def __init__(self, offset: float = 0.0):
        self.offset = offset

    def now(self) -> float:
        return time.time() + self.offset

    def call_at(self, when: float, fn: Callable[[], None]) -> TimerHandle:
        return self.call_later(when - self.now(), fn)

    def call_later(self, delay: float, fn: Callable[[], None]) -> TimerHandle:
        handle = TimerHandle(self.now() + max(delay, 0.0), fn)

        def fire() -> None:
            if not handle.cancelled:
                fn()

        timer = threading.Timer(max(delay, 0.0), fire)
        timer.daemon = True
        handle._timer = timer
        timer.start()
        return handle

    def sleep(self, duration: float) -> None:
        time.sleep(max(duration, 0.0))
