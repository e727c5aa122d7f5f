"""Identifier and nonce sources: seeded in simulation, random otherwise."""

from __future__ import annotations

import hashlib
import random
import secrets
import threading
import uuid


class IdSource:
    def __init__(self, seed: int | None = None):
        self._rng = random.Random(seed) if seed is not None else None
        self._counter = 0
        self._lock = threading.Lock()

    @property
    def deterministic(self) -> bool:
        return self._rng is not None

    def next_id(self, prefix: str = "req") -> str:
        with self._lock:
            self._counter += 1
            if self._rng is None:
                return f"{prefix}-{uuid.uuid4().hex[:16]}"
            return f"{prefix}-{self._counter:06d}"

    def nonce(self, size: int = 16) -> bytes:
        with self._lock:
            if self._rng is None:
                return secrets.token_bytes(size)
            return self._rng.getrandbits(size * 8).to_bytes(size, "big")


def derived_id(prefix: str, *parts: str) -> str:
    """Stable id for something keyed by request_id (jobs, reservations, transfers)."""
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()[:16]
    return f"{prefix}-{digest}"
