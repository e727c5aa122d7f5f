from __future__ import annotations

from typing import Any, Mapping, Sequence

from ..connectivity.endpoint import GridClient
from ..errors import SizeMismatch, UnknownLogical, UnknownTable
from ..resource import client as rc
from ..wire.transport import EndpointAddress

TABLE = "replicas"
DEFAULT_LATENCY = 1.0


def replica_locate(client: GridClient, catalog: EndpointAddress, logical: str) -> list[dict]:
    try:
        reply = client.call(catalog, "info", "QUERY", {"target": "catalog", "table": TABLE, "key": logical})
    except UnknownTable:
        raise UnknownLogical(logical) from None
    records = reply.payload["records"]
    if not records:
        raise UnknownLogical(logical)
    return list(records[0]["copies"])


def replica_register(
    client: GridClient,
    catalog: EndpointAddress,
    logical: str,
    storage: EndpointAddress,
    path: str,
    size: int | None = None,
    latency: float | None = None,
) -> dict:
    """Add a physical copy after proving it exists (storage:read stat at the source)."""
    actual = rc.stat(client, storage, path)
    if size is not None and size != actual:
        raise SizeMismatch(f"{storage}{path} holds {actual} bytes, not {size}")
    if actual <= 0:
        raise SizeMismatch(f"{storage}{path} is empty")
    try:
        copies = replica_locate(client, catalog, logical)
    except UnknownLogical:
        copies = []
    if copies and copies[0]["size"] != actual:
        raise SizeMismatch(f"{logical} copies are {copies[0]['size']} bytes; {storage}{path} is {actual}")
    copy: dict[str, Any] = {"endpoint": str(storage), "path": path, "size": actual}
    if latency is not None:
        copy["latency"] = latency
    copies = [c for c in copies if (c["endpoint"], c["path"]) != (str(storage), path)] + [copy]
    copies.sort(key=lambda c: (c["endpoint"], c["path"]))
    record = {"logical": logical, "size": actual, "copies": copies}
    client.call(catalog, "info", "UPDATE", {"table": TABLE, "key": logical, "record": record})
    return record


def replica_cost(copy: Mapping[str, Any], hints: Mapping[str, Mapping[str, float]] | None = None) -> float:
    hint = dict((hints or {}).get(copy["endpoint"], {}))
    latency = hint.get("latency", copy.get("latency", DEFAULT_LATENCY))
    load = hint.get("load", copy.get("load", 0.0))
    return latency * (1 + load)


def replica_select(copies: Sequence[Mapping[str, Any]], hints: Mapping[str, Mapping[str, float]] | None = None) -> dict:
    """Cheapest copy by latency x (1 + load); ties go to the smaller endpoint name."""
    if not copies:
        raise UnknownLogical("no copies to choose from")
    return dict(min(copies, key=lambda c: (replica_cost(c, hints), c["endpoint"], c["path"])))
