from __future__ import annotations

from typing import Iterable, Mapping

from ..connectivity.auth import Session
from ..connectivity.capability import Capability, sign_capability, verify_capability
from ..connectivity.credentials import Identity, TrustStore, intersect_rights, rights_of
from ..connectivity.endpoint import GridClient, Service, require
from ..errors import NothingGranted, NotMember
from ..wire.codec import Envelope
from ..wire.transport import EndpointAddress

DEFAULT_CAP_LIFETIME = 3600.0


class CommunityAuthorizationService(Service):
    """Issues capabilities to VO members for a subset of the VO's community rights."""

    kind = "ca-server"

    def __init__(self, *args, vos: Mapping[str, Mapping] | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        # vo name -> {"roster": [...], "rights": [...]}
        self.vos = {
            name: {"roster": frozenset(cfg.get("roster", ())), "rights": rights_of(cfg.get("rights", ()))}
            for name, cfg in (vos or {}).items()
        }
        self.issued: list[Capability] = []
        self.route("cauth", "REQUEST-CAP", self._request)

    @property
    def anchor(self) -> TrustStore:
        """What a resource must trust to accept this service's capabilities."""
        return TrustStore({self.identity.name: self.credential.key_handle})

    def grant(self, member: str, vo: str, operations: Iterable[str], resource_pattern: str = "*",
              lifetime: float = DEFAULT_CAP_LIFETIME) -> Capability:
        cfg = self.vos.get(vo)
        if cfg is None or member not in cfg["roster"]:
            raise NotMember(f"{member} is not a member of {vo!r}")
        granted = intersect_rights(rights_of(operations), cfg["rights"])
        if not granted:
            raise NothingGranted(f"none of {sorted(operations)} is a community right of {vo}")
        cap = Capability(
            holder=Identity(member, "user"),
            vo=vo,
            operations=frozenset(granted),
            resource_pattern=resource_pattern,
            not_after=self.clock.now() + lifetime,
            issuer=self.identity,
        )
        cap = sign_capability(cap, self.signer, self.credential.key_handle)
        self.issued.append(cap)
        return cap

    def _request(self, env: Envelope, session: Session) -> tuple[str, dict]:
        vo, operations = require(env.payload, "vo", "operations")
        cap = self.grant(
            session.peer.name,
            str(vo),
            operations,
            str(env.payload.get("resource", "*")),
            float(env.payload.get("lifetime", DEFAULT_CAP_LIFETIME)),
        )
        return "CAPABILITY", {"capability": cap.to_record()}


def request_capability(client: GridClient, server: EndpointAddress, vo: str, operations: Iterable[str],
                       resource_pattern: str = "*", lifetime: float = DEFAULT_CAP_LIFETIME) -> Capability:
    reply = client.call(
        server,
        "cauth",
        "REQUEST-CAP",
        {"vo": vo, "operations": sorted(operations), "resource": resource_pattern, "lifetime": lifetime},
    )
    return Capability.from_record(reply.payload["capability"])


__all__ = ["CommunityAuthorizationService", "request_capability", "verify_capability"]
