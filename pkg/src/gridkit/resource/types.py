from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

from ..errors import Malformed

JOB_STATES = ("staged", "queued", "running", "done", "failed", "cancelled")
JOB_TERMINAL = frozenset({"done", "failed", "cancelled"})


@dataclass(frozen=True)
class JobRequest:
    request_id: str
    executable: str
    work_units: float
    vo: str = ""
    inputs: tuple[str, ...] = ()
    stage_from: tuple[str, tuple[str, ...]] | None = None  # (storage endpoint, paths)
    constraints: Mapping[str, Any] = field(default_factory=dict)
    reservation_id: str | None = None

    def to_record(self) -> dict:
        out: dict[str, Any] = {
            "request_id": self.request_id,
            "executable": self.executable,
            "work_units": self.work_units,
            "vo": self.vo,
            "inputs": list(self.inputs),
            "constraints": dict(self.constraints),
        }
        if self.stage_from is not None:
            out["stage_from"] = {"endpoint": self.stage_from[0], "paths": list(self.stage_from[1])}
        if self.reservation_id is not None:
            out["reservation_id"] = self.reservation_id
        return out

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "JobRequest":
        try:
            stage = record.get("stage_from")
            return cls(
                request_id=str(record["request_id"]),
                executable=str(record["executable"]),
                work_units=record["work_units"],
                vo=str(record.get("vo", "")),
                inputs=tuple(record.get("inputs", ())),
                stage_from=(str(stage["endpoint"]), tuple(stage["paths"])) if stage else None,
                constraints=dict(record.get("constraints", {})),
                reservation_id=record.get("reservation_id"),
            )
        except (KeyError, TypeError) as exc:
            raise Malformed(f"bad job request: {exc}") from None


@dataclass
class JobRecord:
    job_id: str
    request_id: str
    owner: str
    account: str
    host: str
    vo: str
    work_units: float
    state: str = "staged"
    task_id: str | None = None
    output: str | None = None
    exit: dict = field(default_factory=dict)
    transitions: list[tuple[str, float]] = field(default_factory=list)
    reservation_id: str | None = None

    @property
    def terminal(self) -> bool:
        return self.state in JOB_TERMINAL

    def move(self, state: str, now: float) -> None:
        if self.state == state and self.transitions:
            return
        self.state = state
        self.transitions.append((state, now))

    def to_record(self) -> dict:
        out = {
            "job_id": self.job_id,
            "request_id": self.request_id,
            "owner": self.owner,
            "account": self.account,
            "host": self.host,
            "vo": self.vo,
            "work_units": self.work_units,
            "state": self.state,
            "task_id": self.task_id,
            "output": self.output,
            "exit": dict(self.exit),
            "transitions": [[s, t] for s, t in self.transitions],
        }
        if self.reservation_id is not None:
            out["reservation_id"] = self.reservation_id
        return {k: v for k, v in out.items() if v is not None}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "JobRecord":
        return cls(
            job_id=record["job_id"],
            request_id=record["request_id"],
            owner=record["owner"],
            account=record["account"],
            host=record["host"],
            vo=record.get("vo", ""),
            work_units=record["work_units"],
            state=record["state"],
            task_id=record.get("task_id"),
            output=record.get("output"),
            exit=dict(record.get("exit", {})),
            transitions=[(s, t) for s, t in record.get("transitions", [])],
            reservation_id=record.get("reservation_id"),
        )


@dataclass(frozen=True)
class TransferRequest:
    request_id: str
    source: str  # endpoint address
    source_path: str
    destination: str
    destination_path: str
    offset: int = 0
    length: int | None = None
    streams: int = 1

    def __post_init__(self) -> None:
        if self.streams < 1:
            raise ValueError("streams must be at least 1")

    def to_record(self) -> dict:
        out = {
            "request_id": self.request_id,
            "source": self.source,
            "source_path": self.source_path,
            "destination": self.destination,
            "destination_path": self.destination_path,
            "offset": self.offset,
            "streams": self.streams,
        }
        if self.length is not None:
            out["length"] = self.length
        return out

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "TransferRequest":
        try:
            return cls(
                request_id=str(record["request_id"]),
                source=str(record["source"]),
                source_path=str(record["source_path"]),
                destination=str(record["destination"]),
                destination_path=str(record["destination_path"]),
                offset=int(record.get("offset", 0)),
                length=record.get("length"),
                streams=int(record.get("streams", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise Malformed(f"bad transfer request: {exc}") from None


@dataclass(frozen=True)
class TransferReport:
    bytes_moved: int
    chunks: int
    duration: float

    def to_record(self) -> dict:
        return {"bytes_moved": self.bytes_moved, "chunks": self.chunks, "duration": self.duration}

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "TransferReport":
        return cls(int(record["bytes_moved"]), int(record["chunks"]), float(record["duration"]))


def chunk_ranges(offset: int, length: int, streams: int) -> list[tuple[int, int]]:
    """Split [offset, offset+length) into ``streams`` contiguous (start, size) pieces.

    Pieces are near-equal; the remainder goes to the last one. Empty pieces
    are dropped, so fewer than ``streams`` chunks come back for tiny ranges.
    """
    if streams < 1:
        raise ValueError("streams must be at least 1")
    base, extra = divmod(length, streams)
    out = []
    start = offset
    for i in range(streams):
        size = base + (extra if i == streams - 1 else 0)
        if size:
            out.append((start, size))
        start += size
    return out
