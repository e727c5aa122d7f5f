"""Online proxy-credential store: deposit a proxy, retrieve it later with a tag."""

from __future__ import annotations

import hashlib
import hmac
from collections import defaultdict
from dataclasses import dataclass

from ..errors import AllExpired, NotFound, WrongTag
from ..wire.codec import Envelope
from ..wire.transport import EndpointAddress
from .credentials import Delegation, verify_chain
from .endpoint import GridClient, Service, require


def _tag_digest(subject: str, tag: str) -> bytes:
    return hashlib.sha256(f"{subject}\x1f{tag}".encode("utf-8")).digest()


@dataclass
class _Stored:
    delegation: Delegation
    tag_digest: bytes
    stored_at: float


class CredentialStore(Service):
    kind = "cred-store"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._entries: dict[str, list[_Stored]] = defaultdict(list)
        self.route("auth", "STORE-PROXY", self._store, anonymous=True)
        self.route("auth", "FETCH-PROXY", self._fetch, anonymous=True)

    def _store(self, env: Envelope, _session) -> tuple[str, dict]:
        record, tag = require(env.payload, "delegation", "tag")
        delegation = Delegation.from_record(record)
        subject, _ = verify_chain(delegation.proxy, self.trust, self.clock.now(), self.signer)
        with self._lock:
            self._entries[subject.name].append(
                _Stored(delegation, _tag_digest(subject.name, str(tag)), self.clock.now())
            )
        return "STORED", {"subject": subject.name, "not_after": delegation.proxy.not_after}

    def _fetch(self, env: Envelope, _session) -> tuple[str, dict]:
        subject, tag = (str(v) for v in require(env.payload, "subject", "tag"))
        now = self.clock.now()
        with self._lock:
            stored = self._entries.get(subject)
            if not stored:
                raise NotFound(f"nothing stored for {subject}")
            live = [s for s in stored if s.delegation.proxy.not_after >= now]
            self._entries[subject] = live
            if not live:
                raise AllExpired(f"every proxy stored for {subject} has expired")
            digest = _tag_digest(subject, tag)
            for entry in reversed(live):
                if hmac.compare_digest(entry.tag_digest, digest):
                    return "PROXY", {"delegation": entry.delegation.to_record()}
        raise WrongTag("tag does not match any stored proxy")


def store_proxy(client: GridClient, store: EndpointAddress, delegation: Delegation, tag: str) -> dict:
    reply = client.call_anonymous(store, "auth", "STORE-PROXY", {"delegation": delegation.to_record(), "tag": tag})
    return reply.payload


def fetch_proxy(client: GridClient, store: EndpointAddress, subject: str, tag: str) -> Delegation:
    reply = client.call_anonymous(store, "auth", "FETCH-PROXY", {"subject": subject, "tag": tag})
    delegation = Delegation.from_record(reply.payload["delegation"])
    delegation.install(client.signer)
    return delegation
