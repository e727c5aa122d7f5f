"""Exception hierarchy shared by every layer.

Every error carries a stable ``code`` (the class name) so it can cross the
wire inside an ERROR envelope and be rebuilt on the other side.
"""

from __future__ import annotations

from typing import Any


class GridError(Exception):
    """Base class. ``stage`` names the pipeline step that failed."""

    stage: str = ""
    exit_code = 1

    def __init__(self, message: str = "", *, stage: str | None = None, **detail: Any):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__
        if stage is not None:
            self.stage = stage
        self.detail = detail

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_record(self) -> dict:
        return {
            "code": self.code,
            "stage": self.stage,
            "message": self.message,
            "detail": dict(self.detail),
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GridError):
            return NotImplemented
        return self.to_record() == other.to_record()

    def __hash__(self) -> int:
        return hash((self.code, self.message))

    def __repr__(self) -> str:
        extra = f", detail={self.detail!r}" if self.detail else ""
        return f"{self.code}({self.message!r}{extra})"


class LinkError(GridError):
    """A chain-verification failure pinned to one link (root is index 0)."""

    def __init__(self, link: int, message: str = "", **detail: Any):
        super().__init__(message or f"{type(self).__name__} at link {link}", link=link, **detail)
        self.link = link


# wire
class UnencodableValue(GridError):
    pass


class Malformed(GridError):
    pass


class UnsupportedVersion(GridError):
    pass


class NoCommonVersion(GridError):
    pass


class TransportError(GridError):
    exit_code = 3


class Timeout(TransportError):
    pass


class Unreachable(TransportError):
    pass


# connectivity
class NotAnAuthority(GridError):
    pass


class UntrustedRoot(GridError):
    pass


class Expired(LinkError):
    pass


class BadSignature(LinkError):
    pass


class RightsEscalation(LinkError):
    pass


class ChainTooDeep(GridError):
    pass


class PeerMismatch(GridError):
    pass


class ParentExpired(GridError):
    pass


class NoMapping(GridError):
    stage = "mapping"


class WrongTag(GridError):
    pass


class AllExpired(GridError):
    pass


class UnknownSession(GridError):
    stage = "auth"


# fabric / resource
class NotFound(GridError):
    pass


class UnknownTask(GridError):
    pass


class NoSpace(GridError):
    pass


class NegativeOffset(GridError):
    pass


class BadPath(GridError):
    pass


class Conflict(GridError):
    pass


class UnknownReservation(GridError):
    pass


class UnknownTable(GridError):
    pass


class AuthFailed(GridError):
    stage = "auth"


class TtlOutOfRange(GridError):
    pass


class NotRegistered(GridError):
    pass


class Denied(GridError):
    stage = "policy"


class StagingFailed(GridError):
    stage = "staging"


class ResourceSaturated(GridError):
    stage = "admission"


class UnknownJob(GridError):
    pass


class NotOwner(GridError):
    pass


class SourceDenied(GridError):
    stage = "source"


class DestDenied(GridError):
    stage = "destination"


class PartialFailure(GridError):
    stage = "transfer"


class UnknownOperation(GridError):
    pass


# collective
class UnknownView(GridError):
    pass


class LegConflict(GridError):
    pass


class LegUnreachable(GridError):
    pass


class Aborted(GridError):
    pass


class AbortedTwice(GridError):
    pass


class UnknownLogical(GridError):
    pass


class SizeMismatch(GridError):
    pass


class NotMember(GridError):
    pass


class NothingGranted(GridError):
    pass


# harness
class ValidationError(GridError):
    exit_code = 2

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}", path=path)
        self.path = path


class Deadline(GridError):
    pass


class Starvation(GridError):
    pass


def _registry() -> dict[str, type[GridError]]:
    out: dict[str, type[GridError]] = {}
    stack: list[type[GridError]] = [GridError]
    while stack:
        cls = stack.pop()
        out[cls.__name__] = cls
        stack.extend(cls.__subclasses__())
    return out


def error_from_record(record: dict) -> GridError:
    """Rebuild an exception from the ``to_record`` form received off the wire."""
    cls = _registry().get(record.get("code", ""), GridError)
    detail = dict(record.get("detail") or {})
    message = record.get("message", "")
    if issubclass(cls, LinkError):
        link = detail.pop("link", -1)
        err: GridError = cls(link, message, **detail)
    elif cls is ValidationError:
        err = cls.__new__(cls)
        GridError.__init__(err, message, **detail)
        err.path = detail.get("path", "")
    else:
        err = cls(message, **detail)
    if record.get("stage"):
        err.stage = record["stage"]
    return err
