"""Wall-clock TCP transport for the proxy roles.

Each TCP connection becomes one :class:`PeerLink`. A reader thread per
connection reassembles frames and hands them to the owning node's
``handle_inbound``; writes go through a per-link lock so concurrent responses
never interleave on the stream. A stream that cannot be resynchronised
(bad magic, oversized frame, reset) takes the link DOWN.
"""
from __future__ import annotations

import logging
import socket
import threading
from typing import Iterable, Optional

from .envelope import DEFAULT_MAX_FRAME, HEADER, FrameDecoder, MsgType, ServiceIdentity, WireError, encode_frame
from .proxy import PeerLink
from .registry import wall_clock_ms
from .simnet import Inbound

log = logging.getLogger(__name__)

HEARTBEAT = encode_frame(MsgType.HEARTBEAT, b"")


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host.strip("[]"), int(port)


class TcpLink:
    """Binds a connected socket to a PeerLink and a receiving node."""

    def __init__(self, sock: socket.socket, node: Inbound, service_id: ServiceIdentity, endpoint: str,
                 replica_id: int = 0, max_frame: int = DEFAULT_MAX_FRAME):
        self.sock = sock
        self.node = node
        self._lock = threading.Lock()
        self._decoder = FrameDecoder(max_frame + HEADER.size + 64)
        self.link = PeerLink(service_id, endpoint, replica_id, send=self._send)
        self.link.mark_up(wall_clock_ms())
        self._reader = threading.Thread(target=self._read_loop, name=f"link-{endpoint}", daemon=True)

    def start(self) -> "TcpLink":
        self._reader.start()
        return self

    def _send(self, frame: bytes) -> None:
        with self._lock:
            try:
                self.sock.sendall(frame)
            except OSError:
                self.close()
                raise

    def _read_loop(self) -> None:
        try:
            while True:
                data = self.sock.recv(65536)
                if not data:
                    break
                for kind, body in self._decoder.feed(data):
                    self.link.heard(wall_clock_ms())
                    if kind is MsgType.HEARTBEAT:
                        continue
                    self.node.handle_inbound(encode_frame(kind, body), self.link)
        except WireError as exc:
            self.link.decode_errors += 1
            log.warning("closing %s: unrecoverable stream: %s", self.link.endpoint, exc)
        except OSError as exc:
            log.debug("link %s closed: %s", self.link.endpoint, exc)
        finally:
            self.close()

    def close(self) -> None:
        self.link.mark_down()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def dial(node: Inbound, service_id: ServiceIdentity, endpoint: str, replica_id: int = 0,
         timeout_s: float = 2.0, max_frame: int = DEFAULT_MAX_FRAME) -> TcpLink:
    """Connect to a listening proxy; the returned link is UP with its reader running."""
    host, port = parse_endpoint(endpoint)
    sock = socket.create_connection((host, port), timeout=timeout_s)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpLink(sock, node, service_id, endpoint, replica_id, max_frame).start()


class FrameServer:
    """Accepts connections for a replica adapter or gateway node."""

    def __init__(self, node: Inbound, service_id: ServiceIdentity, host: str = "127.0.0.1", port: int = 0,
                 max_frame: int = DEFAULT_MAX_FRAME):
        self.node = node
        self.service_id = service_id
        self.max_frame = max_frame
        self.sock = socket.create_server((host, port))
        self.links: list[TcpLink] = []
        self._stopped = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, name="frame-server", daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self.sock.getsockname()[:2]
        return f"{host}:{port}"

    def start(self) -> "FrameServer":
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                conn, addr = self.sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            tl = TcpLink(conn, self.node, self.service_id, f"{addr[0]}:{addr[1]}", max_frame=self.max_frame)
            self.links.append(tl)
            tl.start()

    def stop(self) -> None:
        self._stopped.set()
        self.sock.close()
        for tl in self.links:
            tl.close()


class HeartbeatPump:
    """Sends HEARTBEAT frames on a set of links and marks silent ones DOWN."""

    def __init__(self, links: Iterable[PeerLink] = (), interval_ms: float = 1000.0):
        self.links = list(links)
        self.interval_ms = interval_ms
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def tick(self, now: float | None = None) -> list[PeerLink]:
        """One round; returns the links found dead in this round."""
        now = wall_clock_ms() if now is None else now
        dead = []
        for link in list(self.links):
            if not link.up:
                continue
            if not link.check_liveness(now):
                dead.append(link)
                continue
            try:
                link.transmit(HEARTBEAT)
            except (ConnectionError, OSError):
                link.mark_down()
                dead.append(link)
        return dead

    def start(self) -> "HeartbeatPump":
        def run():
            while not self._stop.wait(self.interval_ms / 1000.0):
                self.tick()

        self._thread = threading.Thread(target=run, name="heartbeats", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
