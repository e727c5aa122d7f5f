from .auth import Authenticator, Channel, Session, authenticate
from .credentials import (
    CLOCK_SKEW,
    MAX_CHAIN_DEPTH,
    CertificateAuthority,
    Credential,
    Delegation,
    GridMap,
    Identity,
    ProxyCredential,
    TrustStore,
    chain_from_record,
    chain_to_record,
    create_proxy,
    delegate,
    has_right,
    intersect_rights,
    issue_credential,
    map_to_local,
    rights_subset,
    verify_chain,
)
from .credstore import CredentialStore, fetch_proxy, store_proxy
from .endpoint import GridClient, Service
from .signing import DigestSigner, Ed25519Signer, Signer

__all__ = [
    "CLOCK_SKEW",
    "MAX_CHAIN_DEPTH",
    "Authenticator",
    "CertificateAuthority",
    "Channel",
    "Credential",
    "CredentialStore",
    "Delegation",
    "DigestSigner",
    "Ed25519Signer",
    "GridClient",
    "GridMap",
    "Identity",
    "ProxyCredential",
    "Service",
    "Session",
    "Signer",
    "TrustStore",
    "authenticate",
    "chain_from_record",
    "chain_to_record",
    "create_proxy",
    "delegate",
    "fetch_proxy",
    "has_right",
    "intersect_rights",
    "issue_credential",
    "map_to_local",
    "rights_subset",
    "store_proxy",
    "verify_chain",
]
