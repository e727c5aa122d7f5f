from __future__ import annotations

import posixpath
import threading

from ..errors import BadPath, NegativeOffset, NoSpace, NotFound
from .descriptor import ResourceDescriptor


def normalize_path(path: str) -> str:
    if not isinstance(path, str) or not path.startswith("/"):
        raise BadPath(f"path must be absolute: {path!r}")
    if ".." in path.split("/"):
        raise BadPath(f"'..' is not allowed: {path!r}")
    norm = posixpath.normpath(path)
    if norm.startswith("//"):
        norm = "/" + norm.lstrip("/")
    return norm


class StorageResource:
    """A flat, in-memory file store with a byte capacity."""

    def __init__(self, name: str, org: str, capacity_bytes: int, bandwidth_Bps: int = 10_000_000, tags=()):
        if capacity_bytes < 0:
            raise ValueError("capacity must be non-negative")
        self.name = name
        self.org = org
        self.capacity_bytes = capacity_bytes
        self.bandwidth_Bps = bandwidth_Bps
        self.tags = tuple(sorted(tags))
        self.files: dict[str, bytes] = {}
        self.events: list[dict] = []
        self._lock = threading.RLock()

    @property
    def used_bytes(self) -> int:
        return sum(len(v) for v in self.files.values())

    @property
    def free_bytes(self) -> int:
        return self.capacity_bytes - self.used_bytes

    def put_file(self, path: str, data: bytes) -> None:
        path = normalize_path(path)
        with self._lock:
            replaced = len(self.files.get(path, b""))
            if self.used_bytes - replaced + len(data) > self.capacity_bytes:
                raise NoSpace(f"{len(data)} bytes do not fit in {self.name} ({self.free_bytes + replaced} free)")
            self.files[path] = bytes(data)
            self.events.append({"op": "put", "path": path, "size": len(data)})

    def get_file(self, path: str) -> bytes:
        path = normalize_path(path)
        with self._lock:
            try:
                return self.files[path]
            except KeyError:
                raise NotFound(f"{path} not found on {self.name}") from None

    def read_range(self, path: str, offset: int, length: int | None = None) -> bytes:
        if offset < 0:
            raise NegativeOffset(f"offset {offset} < 0")
        data = self.get_file(path)
        if length is None:
            return data[offset:]
        if length < 0:
            raise NegativeOffset(f"length {length} < 0")
        return data[offset:offset + length]

    def stat(self, path: str) -> int:
        return len(self.get_file(path))

    def exists(self, path: str) -> bool:
        try:
            self.get_file(path)
        except (NotFound, BadPath):
            return False
        return True

    def delete(self, path: str) -> None:
        path = normalize_path(path)
        with self._lock:
            if self.files.pop(path, None) is None:
                raise NotFound(f"{path} not found on {self.name}")
            self.events.append({"op": "delete", "path": path})

    def enquire(self) -> ResourceDescriptor:
        with self._lock:
            used = self.used_bytes
        return ResourceDescriptor(
            name=self.name,
            org=self.org,
            type="storage",
            capacity=self.capacity_bytes,
            tags=self.tags,
            free_bytes=self.capacity_bytes - used,
            load=round(used / self.capacity_bytes, 6) if self.capacity_bytes else 0.0,
            extra={"files": len(self.files), "bandwidth_Bps": self.bandwidth_Bps},
        )
