from __future__ import annotations

import copy
import threading
from typing import Any, Mapping

from ..errors import UnknownTable
from .descriptor import ResourceDescriptor


class CatalogResource:
    """Keyed tables of records. Updates upsert; queries never create tables."""

    def __init__(self, name: str, org: str, tags=()):
        self.name = name
        self.org = org
        self.tags = tuple(sorted(tags))
        self.tables: dict[str, dict[str, dict]] = {}
        self._lock = threading.RLock()

    def update(self, table: str, key: str, record: Mapping[str, Any]) -> None:
        with self._lock:
            self.tables.setdefault(table, {})[key] = copy.deepcopy(dict(record))

    def delete(self, table: str, key: str) -> bool:
        with self._lock:
            return self.tables.get(table, {}).pop(key, None) is not None

    def query(self, table: str, key: str | None = None, filter: Mapping[str, Any] | None = None) -> list[dict]:
        with self._lock:
            if table not in self.tables:
                raise UnknownTable(table)
            rows = self.tables[table]
            if key is not None:
                items = [(key, rows[key])] if key in rows else []
            else:
                items = sorted(rows.items())
            out = []
            for _, record in items:
                if filter and any(k not in record or record[k] != v for k, v in filter.items()):
                    continue
                out.append(copy.deepcopy(record))
            return out

    def enquire(self) -> ResourceDescriptor:
        with self._lock:
            sizes = {t: len(rows) for t, rows in self.tables.items()}
        return ResourceDescriptor(
            name=self.name,
            org=self.org,
            type="catalog",
            capacity=sum(sizes.values()),
            tags=self.tags,
            extra={"tables": sizes},
        )
