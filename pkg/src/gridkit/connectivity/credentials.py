"""Identities, credentials, proxy chains, trust stores and grid maps."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from ..errors import (
    BadSignature,
    ChainTooDeep,
    Expired,
    Malformed,
    NoMapping,
    NotAnAuthority,
    ParentExpired,
    RightsEscalation,
    UntrustedRoot,
)
from ..wire.codec import decode_value, encode_value
from .signing import Signer

CLOCK_SKEW = 2.0
MAX_CHAIN_DEPTH = 16
WILDCARD = "*"
IDENTITY_KINDS = ("user", "service", "authority")

Rights = frozenset


def rights_of(values: Iterable[str]) -> frozenset[str]:
    return frozenset(str(v) for v in values)


def intersect_rights(a: Iterable[str], b: Iterable[str]) -> frozenset[str]:
    """Set intersection where ``*`` stands for every right."""
    a, b = frozenset(a), frozenset(b)
    if WILDCARD in a:
        return b
    if WILDCARD in b:
        return a
    return a & b


def rights_subset(child: Iterable[str], parent: Iterable[str]) -> bool:
    child, parent = frozenset(child), frozenset(parent)
    if WILDCARD in parent:
        return True
    return WILDCARD not in child and child <= parent


def has_right(rights: Iterable[str], operation: str) -> bool:
    rights = frozenset(rights)
    return WILDCARD in rights or operation in rights


@dataclass(frozen=True, order=True)
class Identity:
    name: str
    kind: str = "user"

    def __post_init__(self) -> None:
        if self.kind not in IDENTITY_KINDS:
            raise ValueError(f"unknown identity kind {self.kind!r}")

    def to_record(self) -> dict:
        return {"name": self.name, "kind": self.kind}

    @classmethod
    def from_record(cls, record: dict) -> "Identity":
        return cls(record["name"], record["kind"])

    @property
    def org(self) -> str | None:
        for part in self.name.split("/"):
            if part.startswith("org="):
                return part[4:]
        return None


@dataclass(frozen=True)
class Credential:
    subject: Identity
    issuer: Identity
    rights: frozenset[str]
    not_before: float
    not_after: float
    key_handle: str
    signature: bytes = b""

    def tbs_record(self) -> dict:
        return {
            "subject": self.subject.to_record(),
            "issuer": self.issuer.to_record(),
            "rights": sorted(self.rights),
            "not_before": float(self.not_before),
            "not_after": float(self.not_after),
            "key": self.key_handle,
            "proxy": False,
        }

    def tbs(self) -> bytes:
        return encode_value(self.tbs_record())

    def to_record(self) -> dict:
        return {**self.tbs_record(), "sig": self.signature}

    @property
    def parent_link(self) -> "Credential | None":
        return None

    def chain(self) -> list["Credential"]:
        """Links ordered root first, leaf last."""
        links: list[Credential] = []
        node: Credential | None = self
        while node is not None:
            links.append(node)
            node = node.parent_link
        links.reverse()
        return links

    @property
    def depth(self) -> int:
        return len(self.chain())

    @property
    def root(self) -> "Credential":
        return self.chain()[0]

    def valid_at(self, now: float, skew: float = 0.0) -> bool:
        return self.not_before - skew <= now <= self.not_after + skew


@dataclass(frozen=True)
class ProxyCredential(Credential):
    parent: Credential | None = None
    restrictions: frozenset[str] = field(default_factory=frozenset)

    @property
    def parent_link(self) -> Credential | None:
        return self.parent

    def tbs_record(self) -> dict:
        record = super().tbs_record()
        record["proxy"] = True
        record["restrictions"] = sorted(self.restrictions)
        record["parent_key"] = self.parent.key_handle if self.parent else ""
        record["parent_sig"] = self.parent.signature if self.parent else b""
        return record


def link_from_record(record: dict, parent: Credential | None) -> Credential:
    try:
        common = dict(
            subject=Identity.from_record(record["subject"]),
            issuer=Identity.from_record(record["issuer"]),
            rights=rights_of(record["rights"]),
            not_before=float(record["not_before"]),
            not_after=float(record["not_after"]),
            key_handle=str(record["key"]),
            signature=bytes(record["sig"]),
        )
        if record["proxy"]:
            cred: Credential = ProxyCredential(
                parent=parent, restrictions=rights_of(record["restrictions"]), **common
            )
        else:
            if parent is not None:
                raise Malformed("non-proxy link below the root")
            cred = Credential(**common)
    except (KeyError, TypeError, ValueError) as exc:
        raise Malformed(f"bad credential record: {exc}") from None
    if record != cred.to_record():
        raise Malformed("credential record has unexpected or altered fields")
    return cred


def chain_to_record(leaf: Credential) -> list[dict]:
    return [link.to_record() for link in leaf.chain()]


def chain_from_record(records: list) -> Credential:
    if not isinstance(records, list) or not records:
        raise Malformed("credential chain must be a non-empty list")
    node: Credential | None = None
    for record in records:
        if not isinstance(record, dict):
            raise Malformed("credential link must be a record")
        node = link_from_record(record, node)
    assert node is not None
    return node


def encode_chain(leaf: Credential) -> bytes:
    return encode_value(chain_to_record(leaf))


def decode_chain(data: bytes) -> Credential:
    return chain_from_record(decode_value(data))


@dataclass(frozen=True)
class TrustStore:
    """Local trust anchors: authority name -> verification handle."""

    anchors: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def of(cls, *authorities: "CertificateAuthority") -> "TrustStore":
        return cls({ca.identity.name: ca.key_handle for ca in authorities})

    def handle_for(self, name: str) -> str | None:
        return self.anchors.get(name)

    def with_anchor(self, name: str, handle: str) -> "TrustStore":
        return TrustStore({**self.anchors, name: handle})

    def to_record(self) -> list[dict]:
        return [{"name": n, "handle": h} for n, h in sorted(self.anchors.items())]

    @classmethod
    def from_record(cls, records: list) -> "TrustStore":
        return cls({r["name"]: r["handle"] for r in records})

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(encode_value(self.to_record()))

    @classmethod
    def load(cls, path: str | Path) -> "TrustStore":
        return cls.from_record(decode_value(Path(path).read_bytes()))


@dataclass(frozen=True)
class GridMap:
    entries: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "GridMap":
        entries: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.rsplit(None, 1)
            if len(parts) != 2:
                raise ValueError(f"gridmap line {lineno}: expected '<identity> <account>'")
            identity, account = parts
            if identity in entries:
                raise ValueError(f"gridmap line {lineno}: {identity} mapped twice")
            entries[identity] = account
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "GridMap":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        return "".join(f"{ident} {acct}\n" for ident, acct in sorted(self.entries.items()))


def map_to_local(identity: Identity | str, gridmap: GridMap) -> str:
    name = identity.name if isinstance(identity, Identity) else identity
    try:
        return gridmap.entries[name]
    except KeyError:
        raise NoMapping(f"{name} has no local account") from None


@dataclass
class CertificateAuthority:
    """An authority identity plus the handle of its signing key."""

    identity: Identity
    key_handle: str
    signer: Signer

    @classmethod
    def create(cls, name: str, signer: Signer) -> "CertificateAuthority":
        return cls(Identity(name, "authority"), signer.generate(name, long_term=True), signer)

    def issue(
        self,
        subject: Identity,
        rights: Iterable[str],
        not_before: float,
        not_after: float,
        subject_key: str | None = None,
    ) -> Credential:
        return issue_credential(
            self.identity, subject, rights, (not_before, not_after), self.signer, self.key_handle, subject_key
        )


def issue_credential(
    authority: Identity,
    subject: Identity,
    rights: Iterable[str],
    validity: tuple[float, float],
    signer: Signer,
    authority_key: str,
    subject_key: str | None = None,
) -> Credential:
    if authority.kind != "authority":
        raise NotAnAuthority(f"{authority.name} is a {authority.kind}")
    not_before, not_after = float(validity[0]), float(validity[1])
    if not not_before < not_after:
        raise ValueError("validity window must have not_before < not_after")
    if subject_key is None:
        subject_key = signer.generate(subject.name, long_term=subject.kind == "user")
    unsigned = Credential(subject, authority, rights_of(rights), not_before, not_after, subject_key)
    return replace(unsigned, signature=signer.sign(unsigned.tbs(), authority_key))


def create_proxy(
    parent: Credential,
    restrictions: Iterable[str],
    lifetime: float,
    signer: Signer,
    now: float,
) -> ProxyCredential:
    """Derive a short-lived proxy acting as the parent's subject.

    Signing with the parent's key is the only use of that key; when the
    parent is a long-term credential this is the single unlock.
    """
    if now > parent.not_after:
        raise ParentExpired(f"parent expired at {parent.not_after}")
    if parent.depth >= MAX_CHAIN_DEPTH:
        raise ChainTooDeep(f"chain depth would exceed {MAX_CHAIN_DEPTH}")
    restrictions = rights_of(restrictions)
    key = signer.generate(parent.subject.name, long_term=False)
    unsigned = ProxyCredential(
        subject=parent.subject,
        issuer=parent.subject,
        rights=intersect_rights(restrictions, parent.rights),
        not_before=float(now),
        not_after=float(min(now + lifetime, parent.not_after)),
        key_handle=key,
        parent=parent,
        restrictions=restrictions,
    )
    return replace(unsigned, signature=signer.sign(unsigned.tbs(), parent.key_handle))


def verify_chain(
    leaf: Credential, trust: TrustStore, now: float, signer: Signer
) -> tuple[Identity, frozenset[str]]:
    """Validate a chain using only the local trust store and the given time.

    Links are checked root to leaf; for each link the order is signature,
    validity window, then monotonicity (rights, lifetime, subject) against
    its parent. Errors carry the index of the first failing link.
    """
    chain = leaf.chain()
    if len(chain) > MAX_CHAIN_DEPTH:
        raise ChainTooDeep(f"chain of {len(chain)} links exceeds {MAX_CHAIN_DEPTH}")
    root = chain[0]
    anchor = trust.handle_for(root.issuer.name)
    if anchor is None or root.issuer.kind != "authority" or isinstance(root, ProxyCredential):
        raise UntrustedRoot(f"{root.issuer.name} is not a trusted authority")
    for index, link in enumerate(chain):
        handle = anchor if index == 0 else chain[index - 1].key_handle
        if not signer.verify(link.tbs(), link.signature, handle):
            raise BadSignature(index)
        if not link.valid_at(now, CLOCK_SKEW):
            raise Expired(index, window=[link.not_before, link.not_after], now=now)
        if index == 0:
            continue
        parent = chain[index - 1]
        if (
            not rights_subset(link.rights, parent.rights)
            or link.not_after > parent.not_after
            or link.subject != root.subject
        ):
            raise RightsEscalation(index)
    return root.subject, frozenset(leaf.rights)


@dataclass(frozen=True)
class Delegation:
    """A proxy plus its secret: what gets handed to a program acting for the user."""

    proxy: Credential
    secret: bytes

    def to_record(self) -> dict:
        return {"chain": chain_to_record(self.proxy), "secret": self.secret}

    @classmethod
    def from_record(cls, record: dict) -> "Delegation":
        try:
            return cls(chain_from_record(record["chain"]), bytes(record["secret"]))
        except (KeyError, TypeError) as exc:
            raise Malformed(f"bad delegation record: {exc}") from None

    @classmethod
    def of(cls, proxy: Credential, signer: Signer) -> "Delegation":
        return cls(proxy, signer.export_secret(proxy.key_handle))

    def install(self, signer: Signer) -> Credential:
        if not signer.has_key(self.proxy.key_handle):
            signer.import_secret(
                self.proxy.key_handle,
                self.secret,
                owner=self.proxy.subject.name,
                long_term=not isinstance(self.proxy, ProxyCredential) and self.proxy.subject.kind == "user",
            )
        return self.proxy

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_bytes(encode_value(self.to_record()))
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path: str | Path) -> "Delegation":
        return cls.from_record(decode_value(Path(path).read_bytes()))


def delegate(
    parent: Credential, restrictions: Iterable[str], lifetime: float, signer: Signer, now: float
) -> Delegation:
    proxy = create_proxy(parent, restrictions, lifetime, signer, now)
    return Delegation.of(proxy, signer)
