from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Mapping


@dataclass(frozen=True)
class ResourceDescriptor:
    """Snapshot of a resource's static structure and dynamic state."""

    name: str
    org: str
    type: str
    capacity: int
    tags: tuple[str, ...] = ()
    free_slots: int | None = None
    queue_length: int | None = None
    running: int | None = None
    load: float | None = None
    slot_speed: float | None = None
    free_bytes: int | None = None
    endpoint: str | None = None
    policy: Mapping[str, Any] | None = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None or (f.name == "extra" and not value):
                continue
            if f.name == "tags":
                value = sorted(value)
            elif f.name in ("policy", "extra"):
                value = dict(value)
            out[f.name] = value
        return out

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "ResourceDescriptor":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in record.items() if k in known}
        kwargs["tags"] = tuple(sorted(kwargs.get("tags", ())))
        return cls(**kwargs)

    def with_(self, **changes: Any) -> "ResourceDescriptor":
        from dataclasses import replace

        return replace(self, **changes)


RANGE_OPS = ("<=", ">=", "<", ">")


def _range_holds(actual: Any, op: str, bound: Any) -> bool:
    if isinstance(actual, bool) or not isinstance(actual, (int, float)):
        return False
    return {
        "<=": actual <= bound,
        ">=": actual >= bound,
        "<": actual < bound,
        ">": actual > bound,
    }[op]


def matches(record: Mapping[str, Any], filter: Mapping[str, Any] | None) -> bool:
    """Conjunction of attribute tests against a descriptor record.

    ``{"type": "compute"}`` is equality, ``{"tag": "certified"}`` (or
    ``"tags": [...]``) is membership, and ``{"free_slots": {">=": 2}}``
    is a range test.
    """
    for key, want in (filter or {}).items():
        if key == "tag":
            if want not in record.get("tags", ()):
                return False
        elif key == "tags":
            if not set(want) <= set(record.get("tags", ())):
                return False
        elif isinstance(want, Mapping):
            if key not in record:
                return False
            for op, bound in want.items():
                if op not in RANGE_OPS:
                    raise ValueError(f"unknown range operator {op!r}")
                if not _range_holds(record[key], op, bound):
                    return False
        elif key not in record or record[key] != want or isinstance(record[key], bool) != isinstance(want, bool):
            return False
    return True
