"""Canonical record encoding and protocol envelopes.

Values are written as type-tagged text tokens::

    n            None
    t / f        True / False
    i<int>e      integer, canonical decimal
    r<repr>;     float, Python repr (NaN rejected)
    s<n>:<utf8>  string, n = byte length
    b<n>:<raw>   bytes
    l<n>:...     list of n values
    d<n>:...     record of n (string key, value) pairs, keys sorted by UTF-8 bytes

Decoding is strict: any input that is not the exact canonical encoding of
its value is rejected, so ``encode(decode(b)) == b`` whenever decode succeeds.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from ..errors import Malformed, NoCommonVersion, UnencodableValue, UnsupportedVersion

Version = tuple[int, int]

SUPPORTED_MAJOR = 1
CURRENT_VERSION: Version = (1, 0)
PROTOCOL_IDS = ("grrp", "info", "mgmt", "data", "auth", "coalloc", "cauth")

_MAX_DEPTH = 64


def encode_value(value: Any) -> bytes:
    out: list[bytes] = []
    _encode_into(value, out, 0)
    return b"".join(out)


def _encode_into(value: Any, out: list[bytes], depth: int) -> None:
    if depth > _MAX_DEPTH:
        raise UnencodableValue("nesting too deep")
    if value is None:
        out.append(b"n")
    elif value is True:
        out.append(b"t")
    elif value is False:
        out.append(b"f")
    elif isinstance(value, int):
        out.append(b"i%de" % value)
    elif isinstance(value, float):
        if math.isnan(value):
            raise UnencodableValue("NaN has no canonical form")
        out.append(b"r" + repr(value).encode("ascii") + b";")
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(b"s%d:" % len(raw))
        out.append(raw)
    elif isinstance(value, (bytes, bytearray)):
        out.append(b"b%d:" % len(value))
        out.append(bytes(value))
    elif isinstance(value, (list, tuple)):
        out.append(b"l%d:" % len(value))
        for item in value:
            _encode_into(item, out, depth + 1)
    elif isinstance(value, dict):
        items = []
        for key, item in value.items():
            if not isinstance(key, str):
                raise UnencodableValue(f"record key {key!r} is not a string")
            items.append((key.encode("utf-8"), item))
        items.sort(key=lambda kv: kv[0])
        out.append(b"d%d:" % len(items))
        for raw_key, item in items:
            out.append(b"s%d:" % len(raw_key))
            out.append(raw_key)
            _encode_into(item, out, depth + 1)
    else:
        raise UnencodableValue(f"cannot encode {type(value).__name__}")


_N, _T, _F, _I, _R, _S, _B, _L, _D = b"ntfirsbld"
_ZERO = ord("0")


def _digits(data: bytes, pos: int, stop: int, allow_negative: bool) -> tuple[int, int]:
    """Parse a canonical decimal ending at ``stop``; returns (value, position after stop)."""
    idx = data.find(stop, pos)
    if idx < 0:
        raise Malformed("unterminated token")
    text = data[pos:idx]
    body = text[1:] if allow_negative and text[:1] == b"-" else text
    if not body or not body.isdigit():
        raise Malformed(f"bad integer {text.decode('ascii', errors='replace')!r}")
    if (len(body) > 1 and body[0] == _ZERO) or text == b"-0":
        raise Malformed(f"non-canonical integer {text.decode('ascii', errors='replace')!r}")
    return int(text), idx + 1


def decode_value(data: bytes) -> Any:
    data = bytes(data)
    value, pos = _decode_at(data, 0, 0)
    if pos != len(data):
        raise Malformed("trailing bytes after value")
    return value


def _sized(data: bytes, pos: int) -> tuple[bytes, int]:
    n, pos = _digits(data, pos, b":", False)
    end = pos + n
    if end > len(data):
        raise Malformed("truncated input")
    return data[pos:end], end


def _decode_at(data: bytes, pos: int, depth: int) -> tuple[Any, int]:
    if depth > _MAX_DEPTH:
        raise Malformed("nesting too deep")
    if pos >= len(data):
        raise Malformed("truncated input")
    tag = data[pos]
    pos += 1
    if tag == _S:
        raw, pos = _sized(data, pos)
        try:
            return raw.decode("utf-8"), pos
        except UnicodeDecodeError:
            raise Malformed("invalid utf-8 in string") from None
    if tag == _D:
        n, pos = _digits(data, pos, b":", False)
        out: dict[str, Any] = {}
        previous: bytes | None = None
        for _ in range(n):
            if pos >= len(data) or data[pos] != _S:
                raise Malformed("record key must be a string")
            raw_key, pos = _sized(data, pos + 1)
            if previous is not None and raw_key <= previous:
                raise Malformed("record keys not in canonical order")
            previous = raw_key
            try:
                key = raw_key.decode("utf-8")
            except UnicodeDecodeError:
                raise Malformed("invalid utf-8 in key") from None
            out[key], pos = _decode_at(data, pos, depth + 1)
        return out, pos
    if tag == _I:
        return _digits(data, pos, b"e", True)
    if tag == _L:
        n, pos = _digits(data, pos, b":", False)
        items = []
        for _ in range(n):
            item, pos = _decode_at(data, pos, depth + 1)
            items.append(item)
        return items, pos
    if tag == _B:
        return _sized(data, pos)
    if tag == _N:
        return None, pos
    if tag == _T:
        return True, pos
    if tag == _F:
        return False, pos
    if tag == _R:
        idx = data.find(b";", pos)
        if idx < 0:
            raise Malformed("unterminated token")
        text = data[pos:idx].decode("ascii", errors="replace")
        try:
            value = float(text)
        except ValueError:
            raise Malformed(f"bad float {text!r}") from None
        if math.isnan(value) or repr(value) != text:
            raise Malformed(f"non-canonical float {text!r}")
        return value, idx + 1
    raise Malformed(f"unknown type tag {bytes([tag])!r}")


@dataclass(frozen=True)
class Envelope:
    protocol_id: str
    message_type: str
    request_id: str
    sender: str = "anonymous"
    payload: dict = field(default_factory=dict)
    version: Version = CURRENT_VERSION
    signature: bytes | None = None
    # canonical record bytes this envelope was decoded from or signed into;
    # not an init field, so ``replace`` never carries it to a changed copy
    _wire: bytes | None = field(default=None, init=False, compare=False, repr=False)

    def to_record(self) -> dict:
        return {
            "body": self.payload,
            "id": self.request_id,
            "proto": self.protocol_id,
            "sender": self.sender,
            "sig": self.signature,
            "type": self.message_type,
            "ver": [self.version[0], self.version[1]],
        }

    def unsigned(self) -> "Envelope":
        return replace(self, signature=None)

    def _tail(self) -> bytes:
        # keys are sorted, so only "type" and "ver" follow the signature
        return b"s4:type" + encode_value(self.message_type) + b"s3:ver" + encode_value(list(self.version))

    def signing_bytes(self) -> bytes:
        if self._wire is None:
            return encode_value(self.unsigned().to_record())
        tail = self._tail()
        cut = len(self._wire) - len(tail) - len(encode_value(self.signature))
        return self._wire[:cut] + b"n" + tail

    def signed(self, signature: bytes, unsigned_bytes: bytes) -> "Envelope":
        """Copy carrying ``signature``; ``unsigned_bytes`` must be this envelope's signing bytes."""
        out = replace(self, signature=signature)
        tail = self._tail()
        head = unsigned_bytes[: len(unsigned_bytes) - len(tail) - 1]
        object.__setattr__(out, "_wire", head + encode_value(signature) + tail)
        return out


_ENVELOPE_KEYS = {"body", "id", "proto", "sender", "sig", "type", "ver"}


def encode(envelope: Envelope) -> bytes:
    """Frame an envelope: 4-byte big-endian length, then the canonical record."""
    if not envelope.request_id:
        raise UnencodableValue("request_id must be non-empty")
    if not isinstance(envelope.payload, dict):
        raise UnencodableValue("payload must be a record")
    body = envelope._wire if envelope._wire is not None else encode_value(envelope.to_record())
    return struct.pack(">I", len(body)) + body


def decode(data: bytes) -> Envelope:
    if len(data) < 4:
        raise Malformed("missing length prefix")
    (length,) = struct.unpack(">I", data[:4])
    if length != len(data) - 4:
        raise Malformed(f"length prefix {length} does not match body {len(data) - 4}")
    record = decode_value(data[4:])
    if not isinstance(record, dict) or set(record) != _ENVELOPE_KEYS:
        raise Malformed("not an envelope record")
    ver = record["ver"]
    if (
        not isinstance(ver, list)
        or len(ver) != 2
        or not all(type(v) is int and v >= 0 for v in ver)
    ):
        raise Malformed("bad version field")
    if ver[0] > SUPPORTED_MAJOR:
        raise UnsupportedVersion(f"major version {ver[0]} > {SUPPORTED_MAJOR}")
    for key in ("id", "proto", "sender", "type"):
        if not isinstance(record[key], str):
            raise Malformed(f"field {key} must be a string")
    if not record["id"]:
        raise Malformed("empty request_id")
    if not isinstance(record["body"], dict):
        raise Malformed("payload must be a record")
    if record["sig"] is not None and not isinstance(record["sig"], bytes):
        raise Malformed("signature must be bytes")
    env = Envelope(
        protocol_id=record["proto"],
        message_type=record["type"],
        request_id=record["id"],
        sender=record["sender"],
        payload=record["body"],
        version=(ver[0], ver[1]),
        signature=record["sig"],
    )
    object.__setattr__(env, "_wire", data[4:])
    return env


def negotiate_version(client_supported: Iterable[Version], server_supported: Iterable[Version]) -> Version:
    client = {tuple(v) for v in client_supported}
    server = {tuple(v) for v in server_supported}
    common = client & server
    if not common:
        raise NoCommonVersion(f"client {sorted(client)} vs server {sorted(server)}")
    return max(common)  # type: ignore[return-value]
