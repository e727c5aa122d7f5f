"""Pluggable signing.

Two implementations share one interface: a keyed-digest reference signer
(HMAC-SHA256, secrets held by whoever runs the scenario) and Ed25519 for
processes that do not share a secret table.

Signing with a long-term key counts as unlocking it; the audit log of
unlocks is how single sign-on is checked.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey


@dataclass(frozen=True)
class UnlockEvent:
    handle: str
    owner: str
    seq: int


class Signer(ABC):
    def __init__(self) -> None:
        self._owners: dict[str, str] = {}
        self._long_term: set[str] = set()
        self.audit: list[UnlockEvent] = []
        self._lock = threading.Lock()

    @abstractmethod
    def _new_key(self) -> tuple[str, bytes]:
        """Return (handle, secret) for a fresh key."""

    @abstractmethod
    def _sign(self, data: bytes, handle: str) -> bytes: ...

    @abstractmethod
    def verify(self, data: bytes, signature: bytes, handle: str) -> bool: ...

    @abstractmethod
    def export_secret(self, handle: str) -> bytes: ...

    @abstractmethod
    def import_secret(self, handle: str, secret: bytes, owner: str = "", long_term: bool = False) -> None: ...

    def generate(self, owner: str, long_term: bool = False) -> str:
        with self._lock:
            handle, secret = self._new_key()
        self.import_secret(handle, secret, owner, long_term)
        return handle

    def has_key(self, handle: str) -> bool:
        return handle in self._owners

    def sign(self, data: bytes, handle: str) -> bytes:
        if handle not in self._owners:
            raise KeyError(f"no signing secret for {handle}")
        if handle in self._long_term:
            with self._lock:
                self.audit.append(UnlockEvent(handle, self._owners[handle], len(self.audit)))
        return self._sign(data, handle)

    def _remember(self, handle: str, owner: str, long_term: bool) -> None:
        self._owners[handle] = owner
        if long_term:
            self._long_term.add(handle)

    def unlock_count(self, owner: str | None = None, handle: str | None = None) -> int:
        return sum(
            1
            for e in self.audit
            if (owner is None or e.owner == owner) and (handle is None or e.handle == handle)
        )

    def unlock_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.audit:
            out[e.owner] = out.get(e.owner, 0) + 1
        return dict(sorted(out.items()))


class DigestSigner(Signer):
    """Reference keyed-digest signer. Verification needs the secret table."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self._rng = random.Random(seed)
        self._secrets: dict[str, bytes] = {}

    def _new_key(self) -> tuple[str, bytes]:
        secret = self._rng.getrandbits(256).to_bytes(32, "big")
        handle = "kd:" + hashlib.sha256(b"handle" + secret).hexdigest()[:24]
        return handle, secret

    def _sign(self, data: bytes, handle: str) -> bytes:
        return hmac.new(self._secrets[handle], data, hashlib.sha256).digest()

    def verify(self, data: bytes, signature: bytes, handle: str) -> bool:
        secret = self._secrets.get(handle)
        if secret is None or not isinstance(signature, bytes):
            return False
        return hmac.compare_digest(hmac.new(secret, data, hashlib.sha256).digest(), signature)

    def export_secret(self, handle: str) -> bytes:
        return self._secrets[handle]

    def import_secret(self, handle: str, secret: bytes, owner: str = "", long_term: bool = False) -> None:
        self._secrets[handle] = secret
        self._remember(handle, owner, long_term)


class Ed25519Signer(Signer):
    """Handles carry the public key, so anyone can verify without a shared table."""

    PREFIX = "ed25519:"

    def __init__(self, seed: int | None = None):
        super().__init__()
        self._rng = random.Random(seed) if seed is not None else None
        self._keys: dict[str, Ed25519PrivateKey] = {}

    def _new_key(self) -> tuple[str, bytes]:
        if self._rng is not None:
            key = Ed25519PrivateKey.from_private_bytes(self._rng.getrandbits(256).to_bytes(32, "big"))
        else:
            key = Ed25519PrivateKey.generate()
        secret = key.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
        )
        return self._handle_for(key), secret

    def _handle_for(self, key: Ed25519PrivateKey) -> str:
        pub = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return self.PREFIX + pub.hex()

    def _sign(self, data: bytes, handle: str) -> bytes:
        return self._keys[handle].sign(data)

    def verify(self, data: bytes, signature: bytes, handle: str) -> bool:
        if not handle.startswith(self.PREFIX) or not isinstance(signature, bytes):
            return False
        try:
            pub = Ed25519PublicKey.from_public_bytes(bytes.fromhex(handle[len(self.PREFIX):]))
            pub.verify(signature, data)
        except (ValueError, InvalidSignature):
            return False
        return True

    def export_secret(self, handle: str) -> bytes:
        return self._keys[handle].private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
        )

    def import_secret(self, handle: str, secret: bytes, owner: str = "", long_term: bool = False) -> None:
        key = Ed25519PrivateKey.from_private_bytes(secret)
        if self._handle_for(key) != handle:
            raise ValueError("secret does not match handle")
        self._keys[handle] = key
        self._remember(handle, owner, long_term)
