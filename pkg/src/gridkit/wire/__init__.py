from .codec import (
    CURRENT_VERSION,
    PROTOCOL_IDS,
    Envelope,
    decode,
    decode_value,
    encode,
    encode_value,
    negotiate_version,
)
from .transport import EndpointAddress, SimNet, SimNetConfig, TraceEntry, Transport
from .clock import RealClock, SimClock

__all__ = [
    "CURRENT_VERSION",
    "PROTOCOL_IDS",
    "EndpointAddress",
    "Envelope",
    "RealClock",
    "SimClock",
    "SimNet",
    "SimNetConfig",
    "TraceEntry",
    "Transport",
    "decode",
    "decode_value",
    "encode",
    "encode_value",
    "negotiate_version",
]
