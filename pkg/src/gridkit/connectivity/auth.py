"""Mutual authentication handshake (HELLO, CHALLENGE, PROOF, ESTABLISHED)."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import AuthFailed, BadSignature, Malformed, PeerMismatch, error_from_record
from ..ids import IdSource
from ..wire.codec import CURRENT_VERSION, Envelope, negotiate_version
from ..wire.transport import EndpointAddress, Transport
from .credentials import Credential, Identity, TrustStore, chain_from_record, chain_to_record, verify_chain
from .signing import Signer

SUPPORTED_VERSIONS = [CURRENT_VERSION]


@dataclass(frozen=True)
class Session:
    session_id: str
    local: Identity
    peer: Identity
    peer_rights: frozenset[str]
    peer_key: str
    established_at: float
    version: tuple[int, int] = CURRENT_VERSION
    peer_chain: Credential | None = None


@dataclass(frozen=True)
class Channel:
    transport: Transport
    local: EndpointAddress
    peer: EndpointAddress
    timeout: float = 2.0


def sign_envelope(env: Envelope, credential: Credential, signer: Signer) -> Envelope:
    unsigned = env.signing_bytes()
    return env.signed(signer.sign(unsigned, credential.key_handle), unsigned)


def envelope_signed_by(env: Envelope, handle: str, signer: Signer) -> bool:
    return env.signature is not None and signer.verify(env.signing_bytes(), env.signature, handle)


def _raise_if_error(reply: Envelope) -> None:
    if reply.message_type == "ERROR":
        raise error_from_record(reply.payload)


def authenticate(
    channel: Channel,
    my_credential: Credential,
    trust: TrustStore,
    signer: Signer,
    ids: IdSource,
    peer_expected: Identity | str | None = None,
) -> Session:
    """Client half of the handshake; returns the client's view of the session."""
    transport, clock = channel.transport, channel.transport.clock
    me = my_credential.root.subject
    nonce = ids.nonce()
    hello = Envelope(
        "auth",
        "HELLO",
        ids.next_id("auth"),
        sender=me.name,
        payload={
            "chain": chain_to_record(my_credential),
            "nonce": nonce,
            "versions": [list(v) for v in SUPPORTED_VERSIONS],
        },
    )
    reply = transport.request(channel.local, channel.peer, sign_envelope(hello, my_credential, signer), channel.timeout)
    _raise_if_error(reply)
    try:
        server_chain = chain_from_record(reply.payload["chain"])
        server_nonce = bytes(reply.payload["nonce"])
        session_id = str(reply.payload["session"])
        proof = bytes(reply.payload["proof"])
        version = tuple(reply.payload["version"])
    except (KeyError, TypeError, ValueError) as exc:
        raise Malformed(f"bad CHALLENGE: {exc}") from None
    peer, _peer_rights = verify_chain(server_chain, trust, clock.now(), signer)
    if not signer.verify(nonce + session_id.encode(), proof, server_chain.key_handle):
        raise BadSignature(server_chain.depth - 1, "server proof of possession failed")
    if not envelope_signed_by(reply, server_chain.key_handle, signer):
        raise BadSignature(server_chain.depth - 1, "CHALLENGE envelope signature")
    expected = peer_expected.name if isinstance(peer_expected, Identity) else peer_expected
    if expected is not None and peer.name != expected:
        raise PeerMismatch(f"expected {expected}, authenticated {peer.name}")
    proof_msg = Envelope(
        "auth",
        "PROOF",
        ids.next_id("auth"),
        sender=me.name,
        payload={"session": session_id, "proof": signer.sign(server_nonce + session_id.encode(), my_credential.key_handle)},
    )
    done = transport.request(channel.local, channel.peer, sign_envelope(proof_msg, my_credential, signer), channel.timeout)
    _raise_if_error(done)
    if not envelope_signed_by(done, server_chain.key_handle, signer):
        raise BadSignature(server_chain.depth - 1, "ESTABLISHED envelope signature")
    return Session(
        session_id=session_id,
        local=me,
        peer=peer,
        peer_rights=frozenset(server_chain.rights),
        peer_key=server_chain.key_handle,
        established_at=clock.now(),
        version=version,  # type: ignore[arg-type]
        peer_chain=server_chain,
    )


class Authenticator:
    """Server half of the handshake; owns the table of established sessions."""

    def __init__(self, name: str, credential: Credential, trust: TrustStore, signer: Signer, ids: IdSource, clock):
        self.name = name
        self.credential = credential
        self.trust = trust
        self.signer = signer
        self.ids = ids
        self.clock = clock
        self.sessions: dict[str, Session] = {}
        self._pending: dict[str, tuple[Credential, Identity, frozenset[str], bytes]] = {}
        self._counter = 0

    def reset(self) -> None:
        self.sessions.clear()
        self._pending.clear()

    def handle(self, env: Envelope) -> dict:
        """Return the reply payload (type is implied by the request type)."""
        if env.message_type == "HELLO":
            return self._hello(env)
        if env.message_type == "PROOF":
            return self._proof(env)
        raise Malformed(f"unexpected auth message {env.message_type}")

    def _hello(self, env: Envelope) -> dict:
        try:
            chain = chain_from_record(env.payload["chain"])
            client_nonce = bytes(env.payload["nonce"])
            versions = [tuple(v) for v in env.payload.get("versions", [list(CURRENT_VERSION)])]
        except (KeyError, TypeError, ValueError) as exc:
            raise Malformed(f"bad HELLO: {exc}") from None
        version = negotiate_version(versions, SUPPORTED_VERSIONS)
        peer, rights = verify_chain(chain, self.trust, self.clock.now(), self.signer)
        if not envelope_signed_by(env, chain.key_handle, self.signer):
            raise BadSignature(chain.depth - 1, "HELLO envelope signature")
        self._counter += 1
        session_id = f"{self.name}#{self._counter}"
        server_nonce = self.ids.nonce()
        self._pending[session_id] = (chain, peer, rights, server_nonce)
        return {
            "chain": chain_to_record(self.credential),
            "nonce": server_nonce,
            "session": session_id,
            "proof": self.signer.sign(client_nonce + session_id.encode(), self.credential.key_handle),
            "version": list(version),
        }

    def _proof(self, env: Envelope) -> dict:
        session_id = str(env.payload.get("session", ""))
        if session_id in self.sessions:
            return {"session": session_id}
        pending = self._pending.get(session_id)
        if pending is None:
            raise AuthFailed("no handshake in progress for this session")
        chain, peer, rights, server_nonce = pending
        proof = env.payload.get("proof")
        if not isinstance(proof, bytes) or not self.signer.verify(
            server_nonce + session_id.encode(), proof, chain.key_handle
        ):
            raise AuthFailed("client proof of possession failed")
        if not envelope_signed_by(env, chain.key_handle, self.signer):
            raise AuthFailed("PROOF envelope signature")
        del self._pending[session_id]
        self.sessions[session_id] = Session(
            session_id=session_id,
            local=self.credential.root.subject,
            peer=peer,
            peer_rights=rights,
            peer_key=chain.key_handle,
            established_at=self.clock.now(),
            peer_chain=chain,
        )
        return {"session": session_id}


def reply_type(request_type: str) -> str:
    return {"HELLO": "CHALLENGE", "PROOF": "ESTABLISHED"}.get(request_type, "ACK")


__all__ = [
    "Authenticator",
    "Channel",
    "Session",
    "authenticate",
    "envelope_signed_by",
    "reply_type",
    "sign_envelope",
]
