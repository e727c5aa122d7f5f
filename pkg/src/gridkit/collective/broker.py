from __future__ import annotations

from typing import Any, Iterable, Mapping

from ..connectivity.endpoint import GridClient
from ..errors import ValidationError
from ..wire.transport import EndpointAddress
from .index import index_query


REQUIREMENT_KEYS = ("type", "tag", "tags", "min_slots", "max_queue", "exclude")


def normalize_requirements(requirements: Mapping[str, Any] | None) -> dict[str, Any]:
    """Check requirement keys and fold a single ``tag`` into ``tags``.

    An unknown key is an error rather than ignored, since ignoring it would
    silently drop a hard constraint.
    """
    out = dict(requirements or {})
    for key in out:
        if key not in REQUIREMENT_KEYS:
            raise ValidationError(f"requirements.{key}", f"unknown requirement; expected one of {REQUIREMENT_KEYS}")
    if "tag" in out:
        tag = out.pop("tag")
        if not isinstance(tag, str):
            raise ValidationError("requirements.tag", "expected a single tag string")
        out["tags"] = sorted(set(out.get("tags", ())) | {tag})
    if isinstance(out.get("tags"), str):
        out["tags"] = [out["tags"]]
    return out


def satisfies(record: Mapping[str, Any], requirements: Mapping[str, Any]) -> bool:
    requirements = normalize_requirements(requirements)
    if "type" in requirements and record.get("type") != requirements["type"]:
        return False
    if not set(requirements.get("tags", ())) <= set(record.get("tags", ())):
        return False
    if record.get("free_slots", 0) < requirements.get("min_slots", 0):
        return False
    max_queue = requirements.get("max_queue")
    if max_queue is not None and record.get("queue_length", 0) > max_queue:
        return False
    exclude = requirements.get("exclude", ())
    return record.get("name") not in exclude


def rank_key(record: Mapping[str, Any]) -> tuple:
    return (-record.get("free_slots", 0), record.get("queue_length", 0), record.get("name", ""))


def rank_candidates(records: Iterable[Mapping[str, Any]], requirements: Mapping[str, Any] | None = None) -> list[dict]:
    """Keep records meeting every hard requirement, best first.

    Order: most free slots, then shortest queue, then name.
    """
    requirements = normalize_requirements(requirements)
    return sorted((dict(r) for r in records if satisfies(r, requirements)), key=rank_key)


def discover_and_rank(
    client: GridClient,
    index: EndpointAddress,
    requirements: Mapping[str, Any] | None = None,
    view: str | None = None,
) -> list[dict]:
    requirements = normalize_requirements(requirements)
    prefilter: dict[str, Any] = {}
    if "type" in requirements:
        prefilter["type"] = requirements["type"]
    if requirements.get("tags"):
        prefilter["tags"] = list(requirements["tags"])
    return rank_candidates(index_query(client, index, prefilter, view=view), requirements)
