"""Authenticated service endpoints and the matching client.

A :class:`Service` answers the handshake itself and dispatches every other
message to a routed handler once the sender's session and envelope
signature check out. Replies are remembered per (protocol, sender,
request_id), so a retried request is answered from the record instead of
being executed again. A duplicate that arrives while the original is still
being handled is ignored; the original's reply answers both.
"""

from __future__ import annotations

import logging
import threading
from typing import Callable, Sequence

from ..errors import AuthFailed, GridError, Malformed, Timeout, UnknownOperation, UnknownSession, error_from_record
from ..ids import IdSource
from ..wire.codec import Envelope, decode, encode
from ..wire.transport import EndpointAddress, Transport
from .auth import Authenticator, Channel, Session, authenticate, envelope_signed_by, reply_type, sign_envelope
from .credentials import Credential, Delegation, TrustStore, delegate
from .signing import Signer

log = logging.getLogger(__name__)

HandlerFn = Callable[[Envelope, "Session | None"], "tuple[str, dict]"]


class Service:
    kind = "resource-host"

    def __init__(
        self,
        address: EndpointAddress,
        credential: Credential,
        trust: TrustStore,
        signer: Signer,
        transport: Transport,
        ids: IdSource,
    ):
        self.address = address
        self.credential = credential
        self.trust = trust
        self.signer = signer
        self.transport = transport
        self.clock = transport.clock
        self.ids = ids
        self.auth = Authenticator(str(address), credential, trust, signer, ids, self.clock)
        self.running = False
        self._routes: dict[tuple[str, str], tuple[HandlerFn, bool]] = {}
        self._replies: dict[tuple[str, str, str], bytes] = {}
        self._inflight: set[tuple[str, str, str]] = set()
        self._lock = threading.RLock()

    @property
    def identity(self):
        return self.credential.root.subject

    def route(self, protocol: str, message_type: str, fn: HandlerFn, anonymous: bool = False) -> None:
        self._routes[(protocol, message_type)] = (fn, anonymous)

    def start(self) -> None:
        if not self.running:
            self.transport.listen(self.address, self.receive)
            self.running = True

    def stop(self) -> None:
        if self.running:
            self.transport.unlisten(self.address)
            self.running = False

    def _reply(self, request: Envelope, message_type: str, payload: dict) -> bytes:
        env = Envelope(
            request.protocol_id,
            message_type,
            request.request_id,
            sender=self.identity.name,
            payload=payload,
            version=request.version,
        )
        return encode(sign_envelope(env, self.credential, self.signer))

    def _error(self, request: Envelope, err: GridError) -> bytes:
        return self._reply(request, "ERROR", err.to_record())

    def receive(self, data: bytes, src: EndpointAddress) -> bytes | None:
        try:
            env = decode(data)
        except GridError as exc:
            log.debug("%s: undecodable message from %s: %s", self.address, src, exc)
            return None
        if env.protocol_id == "auth" and env.message_type in ("HELLO", "PROOF"):
            try:
                with self._lock:
                    payload = self.auth.handle(env)
                return self._reply(env, reply_type(env.message_type), payload)
            except GridError as exc:
                return self._error(env, exc)

        route = self._routes.get((env.protocol_id, env.message_type))
        if route is None:
            return self._error(env, UnknownOperation(f"{env.protocol_id}/{env.message_type}"))
        fn, anonymous = route
        session: Session | None = None
        if not anonymous:
            session = self.auth.sessions.get(str(env.payload.get("session", "")))
            if session is None:
                return self._error(env, UnknownSession("no such session; authenticate again"))
            if env.sender != session.peer.name or not envelope_signed_by(env, session.peer_key, self.signer):
                return self._error(env, AuthFailed("envelope signature does not match session"))

        key = (env.protocol_id, env.sender, env.request_id)
        with self._lock:
            cached = self._replies.get(key)
            if cached is not None:
                return cached
            if key in self._inflight:
                return None
            self._inflight.add(key)
        try:
            try:
                mtype, payload = fn(env, session)
                reply = self._reply(env, mtype, payload)
            except GridError as exc:
                reply = self._error(env, exc)
            with self._lock:
                self._replies[key] = reply
            return reply
        finally:
            with self._lock:
                self._inflight.discard(key)

    def crash(self) -> None:
        """Lose the listener and every session; remembered replies survive."""
        self.stop()
        with self._lock:
            self.auth.reset()
            self._inflight.clear()

    def restart(self) -> None:
        self.start()


class GridClient:
    """Protocol client bound to one credential (usually a proxy)."""

    def __init__(
        self,
        transport: Transport,
        address: EndpointAddress,
        credential: Credential,
        trust: TrustStore,
        signer: Signer,
        ids: IdSource,
        timeout: float = 2.0,
        retries: int = 3,
    ):
        self.transport = transport
        self.address = address
        self.credential = credential
        self.trust = trust
        self.signer = signer
        self.ids = ids
        self.timeout = timeout
        self.retries = retries
        self._sessions: dict[EndpointAddress, Session] = {}
        self._delegations: dict[tuple, Delegation] = {}
        self._lock = threading.Lock()

    @property
    def identity(self):
        return self.credential.root.subject

    @property
    def clock(self):
        return self.transport.clock

    def with_credential(self, credential: Credential) -> "GridClient":
        return GridClient(
            self.transport, self.address, credential, self.trust, self.signer, self.ids, self.timeout, self.retries
        )

    def delegation(self, restrictions, lifetime: float, parent: Credential | None = None) -> Delegation:
        """A restricted delegation of ``parent``, reused while over half its lifetime remains.

        Reuse keeps one proxy per purpose instead of one per request, so a
        host that receives it can keep its session to the next hop.
        """
        parent = parent or self.credential
        rights = frozenset(restrictions)
        key = (parent.key_handle, rights, float(lifetime))
        now = self.clock.now()
        with self._lock:
            cached = self._delegations.get(key)
        if cached is not None and cached.proxy.not_before <= now and cached.proxy.not_after - now > lifetime / 2:
            return cached
        fresh = delegate(parent, sorted(rights), lifetime, self.signer, now)
        with self._lock:
            self._delegations[key] = fresh
        return fresh

    def forget(self, dst: EndpointAddress | None = None) -> None:
        with self._lock:
            if dst is None:
                self._sessions.clear()
            else:
                self._sessions.pop(dst, None)

    def session(self, dst: EndpointAddress) -> Session:
        with self._lock:
            existing = self._sessions.get(dst)
        if existing is not None:
            return existing
        channel = Channel(self.transport, self.address, dst, self.timeout)
        last: GridError | None = None
        for _ in range(self.retries + 1):
            try:
                sess = authenticate(channel, self.credential, self.trust, self.signer, self.ids)
                break
            except Timeout as exc:
                last = exc
        else:
            assert last is not None
            raise last
        with self._lock:
            self._sessions[dst] = sess
        return sess

    def _envelope(self, sess: Session, protocol: str, message_type: str, payload: dict, request_id: str) -> Envelope:
        env = Envelope(
            protocol,
            message_type,
            request_id,
            sender=self.identity.name,
            payload={**payload, "session": sess.session_id},
        )
        return sign_envelope(env, self.credential, self.signer)

    def _check(self, reply: Envelope, sess: Session) -> Envelope:
        if not envelope_signed_by(reply, sess.peer_key, self.signer):
            raise AuthFailed("reply signature does not match peer")
        if reply.message_type == "ERROR":
            raise error_from_record(reply.payload)
        return reply

    def call(
        self,
        dst: EndpointAddress,
        protocol: str,
        message_type: str,
        payload: dict | None = None,
        request_id: str | None = None,
        timeout: float | None = None,
    ) -> Envelope:
        """Send one request, retrying timeouts with the same request_id."""
        rid = request_id or self.ids.next_id(protocol)
        payload = payload or {}
        last: GridError | None = None
        attempts = 0
        while attempts <= self.retries:
            attempts += 1
            sess = self.session(dst)
            env = self._envelope(sess, protocol, message_type, payload, rid)
            try:
                reply = self.transport.request(self.address, dst, env, timeout or self.timeout)
            except Timeout as exc:
                last = exc
                continue
            try:
                return self._check(reply, sess)
            except UnknownSession as exc:
                self.forget(dst)
                last = exc
        assert last is not None
        raise last

    def call_anonymous(
        self,
        dst: EndpointAddress,
        protocol: str,
        message_type: str,
        payload: dict,
        request_id: str | None = None,
    ) -> Envelope:
        rid = request_id or self.ids.next_id(protocol)
        env = Envelope(protocol, message_type, rid, payload=payload)
        last: GridError | None = None
        for _ in range(self.retries + 1):
            try:
                reply = self.transport.request(self.address, dst, env, self.timeout)
            except Timeout as exc:
                last = exc
                continue
            if reply.message_type == "ERROR":
                raise error_from_record(reply.payload)
            return reply
        assert last is not None
        raise last

    def call_many(
        self,
        dst: EndpointAddress,
        protocol: str,
        requests: Sequence[tuple[str, dict, str]],
    ) -> list[Envelope | GridError]:
        """Send (message_type, payload, request_id) requests concurrently to one peer."""
        results: list[Envelope | GridError | None] = [None] * len(requests)
        pending = list(range(len(requests)))
        for _ in range(self.retries + 1):
            if not pending:
                break
            sess = self.session(dst)
            calls = [
                (dst, self._envelope(sess, protocol, requests[i][0], requests[i][1], requests[i][2])) for i in pending
            ]
            raw = self.transport.request_all(self.address, calls, self.timeout)
            still: list[int] = []
            for i, outcome in zip(pending, raw):
                if isinstance(outcome, Timeout):
                    results[i] = outcome
                    still.append(i)
                    continue
                if isinstance(outcome, GridError):
                    results[i] = outcome
                    continue
                try:
                    results[i] = self._check(outcome, sess)
                except UnknownSession as exc:
                    self.forget(dst)
                    results[i] = exc
                    still.append(i)
                except GridError as exc:
                    results[i] = exc
            pending = still
        return results  # type: ignore[return-value]


def require(payload: dict, *keys: str) -> list:
    try:
        return [payload[k] for k in keys]
    except KeyError as exc:
        raise Malformed(f"missing field {exc.args[0]}") from None
