"""Community capabilities: signed grants that resources check on their own."""

from __future__ import annotations

from dataclasses import dataclass, replace

from ..errors import Malformed
from ..policy import glob_match
from ..wire.codec import encode_value
from .credentials import CLOCK_SKEW, Identity, TrustStore, rights_of
from .signing import Signer


@dataclass(frozen=True)
class Capability:
    holder: Identity
    vo: str
    operations: frozenset[str]
    resource_pattern: str
    not_after: float
    issuer: Identity
    signature: bytes = b""

    def tbs(self) -> bytes:
        record = self.to_record()
        del record["signature"]
        return encode_value(record)

    def to_record(self) -> dict:
        return {
            "holder": self.holder.to_record(),
            "vo": self.vo,
            "operations": sorted(self.operations),
            "resource": self.resource_pattern,
            "not_after": self.not_after,
            "issuer": self.issuer.to_record(),
            "signature": self.signature,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Capability":
        try:
            return cls(
                holder=Identity.from_record(record["holder"]),
                vo=str(record["vo"]),
                operations=rights_of(record["operations"]),
                resource_pattern=str(record["resource"]),
                not_after=float(record["not_after"]),
                issuer=Identity.from_record(record["issuer"]),
                signature=bytes(record["signature"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise Malformed(f"bad capability: {exc}") from None


def sign_capability(cap: Capability, signer: Signer, key_handle: str) -> Capability:
    return replace(cap, signature=signer.sign(cap.tbs(), key_handle))


def capability_problem(
    cap: Capability,
    trust: TrustStore,
    now: float,
    signer: Signer,
    resource: str | None = None,
    holder: str | None = None,
) -> str | None:
    """Why ``cap`` is unusable here, or None. Uses only local state."""
    handle = trust.handle_for(cap.issuer.name)
    if handle is None:
        return f"issuer {cap.issuer.name} is not trusted"
    if not signer.verify(cap.tbs(), cap.signature, handle):
        return "bad signature"
    if now > cap.not_after + CLOCK_SKEW:
        return f"expired at {cap.not_after:g}"
    if resource is not None and not glob_match(cap.resource_pattern, resource):
        return f"{resource} outside {cap.resource_pattern}"
    if holder is not None and cap.holder.name != holder:
        return f"held by {cap.holder.name}, presented by {holder}"
    return None


def verify_capability(cap: Capability, trust: TrustStore, now: float, signer: Signer, resource: str | None = None,
                      holder: str | None = None) -> bool:
    return capability_problem(cap, trust, now, signer, resource, holder) is None
