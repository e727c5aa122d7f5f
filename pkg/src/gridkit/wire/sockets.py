"""TCP transport: one framed request and one framed reply per connection."""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from ..errors import GridError, Malformed, Timeout, Unreachable
from .clock import RealClock
from .codec import Envelope, decode, encode
from .transport import EndpointAddress, Handler, TraceEntry, Transport

log = logging.getLogger(__name__)

_MAX_FRAME = 64 * 1024 * 1024


def read_frame(sock: socket.socket) -> bytes:
    head = _read_exact(sock, 4)
    (length,) = struct.unpack(">I", head)
    if length > _MAX_FRAME:
        raise Malformed(f"frame of {length} bytes exceeds limit")
    return head + _read_exact(sock, length)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise Malformed("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bind: tuple[str, int], handler: Handler):
        self.grid_handler = handler
        super().__init__(bind, _RequestHandler)


class _RequestHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        try:
            data = read_frame(self.request)
        except (Malformed, OSError):
            return
        # Replies are correlated by request_id; the peer address is informational.
        src = EndpointAddress("unknown", "client", f"{self.client_address[0]}:{self.client_address[1]}")
        try:
            reply = self.server.grid_handler(data, src)  # type: ignore[attr-defined]
        except Exception:  # noqa: BLE001 - a handler bug must not kill the listener
            log.exception("handler failed")
            return
        if reply is not None:
            try:
                self.request.sendall(reply)
            except OSError:
                pass


class SocketTransport(Transport):
    """Real sockets on loopback (or any reachable host).

    ``directory`` maps endpoint addresses to (host, port). Listening on an
    address absent from the directory binds an ephemeral port and records it.
    """

    def __init__(self, directory: dict[EndpointAddress, tuple[str, int]] | None = None, clock=None):
        self.directory: dict[EndpointAddress, tuple[str, int]] = dict(directory or {})
        self.clock = clock or RealClock()
        self.trace: list[TraceEntry] = []
        self._servers: dict[EndpointAddress, _Server] = {}
        self._lock = threading.Lock()

    def listen(self, address: EndpointAddress, handler: Handler) -> None:
        host, port = self.directory.get(address, ("127.0.0.1", 0))
        server = _Server((host, port), handler)
        self.directory[address] = server.server_address[:2]
        self._servers[address] = server
        threading.Thread(target=server.serve_forever, name=f"listen-{address}", daemon=True).start()

    def unlisten(self, address: EndpointAddress) -> None:
        server = self._servers.pop(address, None)
        if server is not None:
            server.shutdown()
            server.server_close()

    def is_listening(self, address: EndpointAddress) -> bool:
        return address in self._servers

    def close(self) -> None:
        for address in list(self._servers):
            self.unlisten(address)

    def _record(self, kind: str, src, dst, env: Envelope, size: int) -> TraceEntry:
        with self._lock:
            entry = TraceEntry(
                seq=len(self.trace),
                kind=kind,
                src=str(src),
                dst=str(dst),
                protocol=env.protocol_id,
                message_type=env.message_type,
                request_id=env.request_id,
                sent_at=self.clock.now(),
                size=size,
            )
            self.trace.append(entry)
            return entry

    def request(
        self, src: EndpointAddress, dst: EndpointAddress, envelope: Envelope, timeout: float
    ) -> Envelope:
        data = encode(envelope)
        entry = self._record("request", src, dst, envelope, len(data))
        target = self.directory.get(dst)
        if target is None:
            entry.status = "unreachable"
            raise Unreachable(f"{dst} has no known address")
        try:
            sock = socket.create_connection(target, timeout=timeout)
        except OSError as exc:
            entry.status = "unreachable"
            raise Unreachable(f"{dst} at {target}: {exc}") from None
        try:
            sock.settimeout(timeout)
            sock.sendall(data)
            entry.status = "delivered"
            raw = read_frame(sock)
        except socket.timeout:
            raise Timeout(f"no reply from {dst} within {timeout}s") from None
        except (OSError, Malformed):
            raise Timeout(f"connection to {dst} closed without reply") from None
        finally:
            sock.close()
        reply = decode(raw)
        rentry = self._record("reply", dst, src, reply, len(raw))
        rentry.status = "delivered"
        return reply

    def request_all(
        self,
        src: EndpointAddress,
        calls: Sequence[tuple[EndpointAddress, Envelope]],
        timeout: float,
    ) -> list[Envelope | GridError]:
        def one(call: tuple[EndpointAddress, Envelope]) -> Envelope | GridError:
            try:
                return self.request(src, call[0], call[1], timeout)
            except GridError as exc:
                return exc

        if len(calls) <= 1:
            return [one(c) for c in calls]
        with ThreadPoolExecutor(max_workers=min(8, len(calls))) as pool:
            return list(pool.map(one, calls))
