"""Transport abstraction and the deterministic simulated network."""

from __future__ import annotations

import random
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

from ..errors import GridError, Timeout, Unreachable
from .clock import SimClock
from .codec import Envelope, decode, encode

SERVICE_KINDS = frozenset(
    {"resource-host", "index", "broker", "coalloc", "ca-server", "cred-store", "storage", "client"}
)

Handler = Callable[[bytes, "EndpointAddress"], Union[bytes, None]]


@dataclass(frozen=True, order=True)
class EndpointAddress:
    org: str
    service_kind: str
    name: str

    def __post_init__(self) -> None:
        if self.service_kind not in SERVICE_KINDS:
            raise ValueError(f"unknown service kind {self.service_kind!r}")

    def __str__(self) -> str:
        return f"{self.org}/{self.service_kind}/{self.name}"

    @classmethod
    def parse(cls, text: str) -> "EndpointAddress":
        parts = text.split("/")
        if len(parts) != 3 or not all(parts):
            raise ValueError(f"bad endpoint address {text!r}")
        return cls(*parts)


@dataclass
class TraceEntry:
    seq: int
    kind: str  # request | reply
    src: str
    dst: str
    protocol: str
    message_type: str
    request_id: str
    sent_at: float
    size: int
    status: str = "in-flight"
    delivered_at: float | None = None
    note: str = ""

    def to_record(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "src": self.src,
            "dst": self.dst,
            "protocol": self.protocol,
            "type": self.message_type,
            "request_id": self.request_id,
            "sent_at": self.sent_at,
            "size": self.size,
            "status": self.status,
            "delivered_at": self.delivered_at,
            "note": self.note,
        }

    def touches(self, address: EndpointAddress | str) -> bool:
        name = str(address)
        return self.src == name or self.dst == name


class Transport(ABC):
    """What every layer above the wire sees."""

    clock: object
    trace: list[TraceEntry]

    @abstractmethod
    def listen(self, address: EndpointAddress, handler: Handler) -> None: ...

    @abstractmethod
    def unlisten(self, address: EndpointAddress) -> None: ...

    @abstractmethod
    def is_listening(self, address: EndpointAddress) -> bool: ...

    @abstractmethod
    def request(
        self, src: EndpointAddress, dst: EndpointAddress, envelope: Envelope, timeout: float
    ) -> Envelope: ...

    def request_all(
        self,
        src: EndpointAddress,
        calls: Sequence[tuple[EndpointAddress, Envelope]],
        timeout: float,
    ) -> list[Envelope | GridError]:
        out: list[Envelope | GridError] = []
        for dst, env in calls:
            try:
                out.append(self.request(src, dst, env, timeout))
            except GridError as exc:
                out.append(exc)
        return out

    def message_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for entry in self.trace:
            counts[entry.protocol] = counts.get(entry.protocol, 0) + 1
        return dict(sorted(counts.items()))


@dataclass
class PartitionWindow:
    start: float
    end: float
    pairs: list[tuple[str, str]]

    @classmethod
    def from_record(cls, record: dict) -> "PartitionWindow":
        return cls(
            float(record["start"]),
            float(record["end"]),
            [(str(a), str(b)) for a, b in record.get("pairs", [])],
        )

    def to_record(self) -> dict:
        return {"start": self.start, "end": self.end, "pairs": [list(p) for p in self.pairs]}


@dataclass
class SimNetConfig:
    seed: int = 0
    base_latency: float = 0.01
    jitter: float = 0.0
    loss_probability: float = 0.0
    partition_schedule: list[PartitionWindow] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must lie in [0, 1]")
        if self.base_latency < 0 or self.jitter < 0:
            raise ValueError("latencies must be non-negative")

    @classmethod
    def from_record(cls, record: dict | None) -> "SimNetConfig":
        record = record or {}
        return cls(
            seed=int(record.get("seed", 0)),
            base_latency=float(record.get("base_latency", 0.01)),
            jitter=float(record.get("jitter", 0.0)),
            loss_probability=float(record.get("loss_probability", 0.0)),
            partition_schedule=[PartitionWindow.from_record(w) for w in record.get("partition_schedule", [])],
        )

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "base_latency": self.base_latency,
            "jitter": self.jitter,
            "loss_probability": self.loss_probability,
            "partition_schedule": [w.to_record() for w in self.partition_schedule],
        }


# Fault actions for SimNet.inject_at
DROP = "drop"
DUPLICATE = "duplicate"
UNREACHABLE = "unreachable"


def _pair(a: EndpointAddress | str, b: EndpointAddress | str) -> frozenset[str]:
    return frozenset((str(a), str(b)))


class SimNet(Transport):
    """In-memory network over a :class:`SimClock`.

    Every message (request or reply) gets a sequence number, its *position*.
    Identical seed, config and workload give an identical trace.
    """

    def __init__(self, config: SimNetConfig | None = None, clock: SimClock | None = None):
        self.config = config or SimNetConfig()
        self.clock = clock or SimClock()
        self.rng = random.Random(self.config.seed)
        self.trace: list[TraceEntry] = []
        self._listeners: dict[EndpointAddress, Handler] = {}
        self._mailboxes: dict[tuple[EndpointAddress, str], Envelope | None] = {}
        self._partitions: set[frozenset[str]] = set()
        self._faults: dict[int, object] = {}
        self.reorder_delay = 10.0

    # -- topology ---------------------------------------------------------
    def listen(self, address: EndpointAddress, handler: Handler) -> None:
        if address in self._listeners:
            raise ValueError(f"{address} already has a listener")
        self._listeners[address] = handler

    def unlisten(self, address: EndpointAddress) -> None:
        self._listeners.pop(address, None)

    def is_listening(self, address: EndpointAddress) -> bool:
        return address in self._listeners

    def partition(self, a: EndpointAddress | str, b: EndpointAddress | str) -> None:
        self._partitions.add(_pair(a, b))

    def heal(self, a: EndpointAddress | str, b: EndpointAddress | str) -> None:
        self._partitions.discard(_pair(a, b))

    def partitioned(self, a: EndpointAddress | str, b: EndpointAddress | str) -> bool:
        pair = _pair(a, b)
        if pair in self._partitions:
            return True
        now = self.clock.now()
        for window in self.config.partition_schedule:
            if window.start <= now < window.end and any(_pair(x, y) == pair for x, y in window.pairs):
                return True
        return False

    # -- fault injection --------------------------------------------------
    @property
    def position(self) -> int:
        """Position the next message will receive."""
        return len(self.trace)

    def inject_at(self, position: int, action: str | tuple[str, float]) -> None:
        self._faults[position] = action

    def clear_faults(self) -> None:
        self._faults.clear()

    # -- messaging --------------------------------------------------------
    def request(
        self, src: EndpointAddress, dst: EndpointAddress, envelope: Envelope, timeout: float
    ) -> Envelope:
        result = self.request_all(src, [(dst, envelope)], timeout)[0]
        if isinstance(result, GridError):
            raise result
        return result

    def request_all(
        self,
        src: EndpointAddress,
        calls: Sequence[tuple[EndpointAddress, Envelope]],
        timeout: float,
    ) -> list[Envelope | GridError]:
        results: list[Envelope | GridError | None] = [None] * len(calls)
        keys: list[tuple[EndpointAddress, str] | None] = []
        for i, (dst, env) in enumerate(calls):
            key = (src, env.request_id)
            try:
                self._send(src, dst, encode(env), env, "request")
            except Unreachable as exc:
                results[i] = exc
                keys.append(None)
                continue
            self._mailboxes.setdefault(key, None)
            keys.append(key)
        deadline = self.clock.now() + timeout

        def all_in() -> bool:
            return all(k is None or self._mailboxes.get(k) is not None for k in keys)

        self.clock.run_until(all_in, deadline)
        for i, key in enumerate(keys):
            if key is None:
                continue
            reply = self._mailboxes.pop(key, None)
            if reply is None:
                results[i] = Timeout(f"no reply from {calls[i][0]} within {timeout}s")
            else:
                results[i] = reply
        return results  # type: ignore[return-value]

    def _send(self, src: EndpointAddress, dst: EndpointAddress, data: bytes, env: Envelope, kind: str) -> None:
        now = self.clock.now()
        entry = TraceEntry(
            seq=len(self.trace),
            kind=kind,
            src=str(src),
            dst=str(dst),
            protocol=env.protocol_id,
            message_type=env.message_type,
            request_id=env.request_id,
            sent_at=now,
            size=len(data),
        )
        self.trace.append(entry)
        # Always consume the same random draws per message so injected faults
        # never shift the randomness seen by later messages.
        lost = self.rng.random() < self.config.loss_probability
        latency = self.config.base_latency + (self.rng.random() * self.config.jitter)
        action = self._faults.pop(entry.seq, None)

        if action == UNREACHABLE or (
            kind == "request" and (dst not in self._listeners or self.partitioned(src, dst))
        ):
            entry.status = "unreachable"
            entry.note = "injected" if action == UNREACHABLE else ""
            if kind == "request":
                raise Unreachable(f"{dst} unreachable from {src}")
            return
        if kind == "reply" and self.partitioned(src, dst):
            entry.status = "unreachable"
            return
        if action == DROP or lost:
            entry.status = "dropped"
            entry.note = "injected" if action == DROP else "loss"
            return
        if isinstance(action, tuple) and action[0] == "delay":
            latency += float(action[1])
            entry.note = "delayed"
        deliver_at = now + latency
        self.clock.call_at(deliver_at, lambda: self._deliver(entry, src, dst, data, kind, env))
        if action == DUPLICATE:
            dup = TraceEntry(
                seq=entry.seq,
                kind=kind,
                src=entry.src,
                dst=entry.dst,
                protocol=entry.protocol,
                message_type=entry.message_type,
                request_id=entry.request_id,
                sent_at=now,
                size=entry.size,
                note="duplicate",
            )
            self.clock.call_at(deliver_at + self.config.base_latency,
                               lambda: self._deliver(dup, src, dst, data, kind, env))

    def _deliver(self, entry: TraceEntry, src: EndpointAddress, dst: EndpointAddress, data: bytes, kind: str,
                 env: Envelope) -> None:
        now = self.clock.now()
        if entry.note == "duplicate":
            self.trace.append(entry)
        if self.partitioned(src, dst):
            entry.status = "unreachable"
            return
        if kind == "request":
            handler = self._listeners.get(dst)
            if handler is None:
                entry.status = "lost"
                return
            entry.status = "delivered"
            entry.delivered_at = now
            reply = handler(data, src)
            if reply is not None:
                reply_env = decode(reply)
                self._send(dst, src, reply, reply_env, "reply")
        else:
            # env was decoded from these exact bytes when the reply was sent
            key = (dst, env.request_id)
            entry.delivered_at = now
            if key in self._mailboxes and self._mailboxes[key] is None:
                self._mailboxes[key] = env
                entry.status = "delivered"
            else:
                entry.status = "orphan"

    def trace_records(self) -> list[dict]:
        return [e.to_record() for e in self.trace]


def entries_touching(trace: Iterable[TraceEntry], address: EndpointAddress | str) -> list[TraceEntry]:
    return [e for e in trace if e.touches(address)]
