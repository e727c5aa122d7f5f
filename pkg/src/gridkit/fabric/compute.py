from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field

from ..errors import NotFound, UnknownOperation, UnknownTask
from .descriptor import ResourceDescriptor
from .storage import StorageResource

QUEUED, RUNNING, DONE, FAILED, CANCELLED = "queued", "running", "done", "failed", "cancelled"
TERMINAL = frozenset({DONE, FAILED, CANCELLED})
_ALLOWED = {
    QUEUED: {RUNNING, CANCELLED},
    RUNNING: {DONE, FAILED, CANCELLED},
}


@dataclass
class Task:
    task_id: str
    work_units: float
    executable: str
    inputs: tuple[str, ...]
    owner: str | None = None
    state: str = QUEUED
    slot: int | None = None
    output: str | None = None
    reason: str = ""
    transitions: list[tuple[str, float]] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "task_id": self.task_id,
            "work_units": self.work_units,
            "executable": self.executable,
            "inputs": list(self.inputs),
            "state": self.state,
            "output": self.output,
            "reason": self.reason,
            "transitions": [[s, t] for s, t in self.transitions],
        }


class ComputeResource:
    """A pool of identical slots fed FIFO from a single queue.

    Execution is simulated: a task occupies a slot for work_units/slot_speed
    seconds of clock time.
    """

    def __init__(
        self,
        name: str,
        org: str,
        total_slots: int,
        clock,
        slot_speed: float = 1.0,
        tags=(),
        local_accounts=(),
        store: StorageResource | None = None,
    ):
        if total_slots < 1:
            raise ValueError("total_slots must be at least 1")
        if slot_speed <= 0:
            raise ValueError("slot_speed must be positive")
        self.name = name
        self.org = org
        self.total_slots = total_slots
        self.slot_speed = float(slot_speed)
        self.tags = tuple(sorted(tags))
        self.local_accounts = frozenset(local_accounts)
        self.clock = clock
        self.store = store
        self.tasks: dict[str, Task] = {}
        self.queue: deque[str] = deque()
        self.running: dict[str, int] = {}
        self.events: list[dict] = []
        self._timers: dict[str, object] = {}
        self._counter = 0
        self._epoch = 0
        self._lock = threading.RLock()

    def _set(self, task: Task, state: str) -> None:
        if state not in _ALLOWED.get(task.state, ()) and not (state == QUEUED and not task.transitions):
            raise AssertionError(f"illegal transition {task.state} -> {state}")
        task.state = state
        task.transitions.append((state, self.clock.now()))

    def start_task(self, work_units: float, executable: str, inputs=(), owner: str | None = None) -> str:
        if work_units < 0:
            raise ValueError("work_units must be non-negative")
        with self._lock:
            if self.store is not None and not self.store.exists(executable):
                raise NotFound(f"executable {executable} is not staged on {self.name}")
            self._counter += 1
            task_id = f"{self.name}-t{self._counter}"
            task = Task(task_id, float(work_units), executable, tuple(inputs), owner)
            self._set(task, QUEUED)
            self.tasks[task_id] = task
            self.queue.append(task_id)
            self.events.append({"op": "start_task", "task": task_id, "owner": owner, "t": self.clock.now()})
            self._schedule()
            return task_id

    def _free_slot(self) -> int | None:
        used = set(self.running.values())
        for slot in range(self.total_slots):
            if slot not in used:
                return slot
        return None

    def _schedule(self) -> None:
        while self.queue:
            slot = self._free_slot()
            if slot is None:
                break
            task = self.tasks[self.queue.popleft()]
            self.running[task.task_id] = slot
            task.slot = slot
            self._set(task, RUNNING)
            assert len(self.running) <= self.total_slots
            epoch = self._epoch
            duration = task.work_units / self.slot_speed
            self._timers[task.task_id] = self.clock.call_later(
                duration, lambda tid=task.task_id, e=epoch: self._complete(tid, e)
            )

    def _complete(self, task_id: str, epoch: int) -> None:
        with self._lock:
            if epoch != self._epoch:
                return
            task = self.tasks.get(task_id)
            if task is None or task.state != RUNNING:
                return
            self.running.pop(task_id, None)
            self._timers.pop(task_id, None)
            if self.store is not None:
                path = f"/out/{task_id}"
                try:
                    self.store.put_file(path, f"{task.executable} {task.work_units:g} ok\n".encode())
                    task.output = path
                    self._set(task, DONE)
                except Exception as exc:  # noqa: BLE001 - any store failure fails the task
                    task.reason = f"output: {exc}"
                    self._set(task, FAILED)
            else:
                self._set(task, DONE)
            self.events.append({"op": "finish", "task": task_id, "state": task.state, "t": self.clock.now()})
            self._schedule()

    def task_status(self, task_id: str) -> str:
        return self.task(task_id).state

    def task(self, task_id: str) -> Task:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def control_task(self, task_id: str, action: str) -> str:
        if action != "cancel":
            raise UnknownOperation(f"unsupported action {action!r}")
        with self._lock:
            task = self.task(task_id)
            if task.state in TERMINAL:
                return task.state
            if task.state == QUEUED:
                self.queue.remove(task_id)
            else:
                self.running.pop(task_id, None)
                timer = self._timers.pop(task_id, None)
                if timer is not None:
                    timer.cancel()
            self._set(task, CANCELLED)
            self.events.append({"op": "cancel", "task": task_id, "t": self.clock.now()})
            self._schedule()
            return task.state

    def crash(self) -> list[str]:
        """Drop all volatile execution state; return the ids of lost tasks."""
        with self._lock:
            self._epoch += 1
            lost = []
            for task_id in list(self.queue):
                self._set(self.tasks[task_id], CANCELLED)
                self.tasks[task_id].reason = "host crash"
                lost.append(task_id)
            for task_id in list(self.running):
                self._set(self.tasks[task_id], FAILED)
                self.tasks[task_id].reason = "host crash"
                lost.append(task_id)
            for timer in self._timers.values():
                timer.cancel()
            self._timers.clear()
            self.queue.clear()
            self.running.clear()
            self.events.append({"op": "crash", "lost": lost, "t": self.clock.now()})
            return lost

    def enquire(self) -> ResourceDescriptor:
        with self._lock:
            running = len(self.running)
            queued = len(self.queue)
        return ResourceDescriptor(
            name=self.name,
            org=self.org,
            type="compute",
            capacity=self.total_slots,
            tags=self.tags,
            free_slots=self.total_slots - running,
            queue_length=queued,
            running=running,
            load=round(running / self.total_slots, 6),
            slot_speed=self.slot_speed,
        )

    def start_events(self) -> list[dict]:
        return [e for e in self.events if e["op"] == "start_task"]
