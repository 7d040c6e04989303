"""Metadata server: maps service identities to live replica endpoints.

The server only brokers connectivity. It refuses REQUEST/RESPONSE frames, so
application traffic cannot flow through it, and losing it only stalls the
discovery of new peers.
"""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass
from typing import Callable

from .envelope import (
    FrameDecoder,
    MsgType,
    PeerInfo,
    ServiceIdentity,
    WireError,
    decode_ack,
    decode_disconnect,
    decode_frame,
    decode_peer,
    decode_peer_list,
    encode_ack,
    encode_disconnect,
    encode_frame,
    encode_peer,
    encode_peer_list,
)
from .registry import wall_clock_ms

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL_MS = 2_000.0
EXPIRY_MS = 10_000.0


class DiscoveryUnavailable(ConnectionError):
    pass


@dataclass
class PeerRecord:
    service_id: ServiceIdentity
    endpoint: str
    replica_id: int
    registered_at: float
    last_heartbeat: float


class DiscoveryServer:
    """Directory of PeerRecords, keyed by service id then replica id.

    ``expiry_ms=None`` disables heartbeat-based eviction.
    """

    def __init__(self, clock: Callable[[], float] = wall_clock_ms, expiry_ms: float | None = EXPIRY_MS):
        self.clock = clock
        self.expiry_ms = expiry_ms
        self.alive = True
        self._records: dict[ServiceIdentity, dict[int, PeerRecord]] = {}
        self._lock = threading.RLock()
        self.rejected_data_frames = 0

    # -- lifecycle (fault injection) --------------------------------------
    def kill(self) -> None:
        self.alive = False

    def restart(self, keep_state: bool = False) -> None:
        with self._lock:
            if not keep_state:
                self._records.clear()
        self.alive = True

    def _require_alive(self) -> None:
        if not self.alive:
            raise DiscoveryUnavailable("discovery server is down")

    # -- directory operations ---------------------------------------------
    def register_peer(self, service_id: ServiceIdentity, endpoint: str, replica_id: int) -> None:
        self._require_alive()
        now = self.clock()
        with self._lock:
            peers = self._records.setdefault(service_id, {})
            old = peers.get(replica_id)
            if old is not None and old.endpoint == endpoint:
                old.last_heartbeat = now
            else:
                # a relaunched replica keeps its id but lands on a new endpoint
                peers[replica_id] = PeerRecord(service_id, endpoint, replica_id, now, now)

    def heartbeat(self, service_id: ServiceIdentity, endpoint: str, replica_id: int) -> None:
        # heartbeats carry the full record so a restarted server repopulates itself
        self.register_peer(service_id, endpoint, replica_id)

    def lookup(self, service_id: ServiceIdentity) -> list[tuple[str, int]]:
        self._require_alive()
        now = self.clock()
        with self._lock:
            self._evict(now, service_id)
            peers = self._records.get(service_id, {})
            return [(r.endpoint, r.replica_id) for r in sorted(peers.values(), key=lambda r: r.replica_id)]

    def report_disconnect(self, service_id: ServiceIdentity, replica_id: int) -> None:
        self._require_alive()
        with self._lock:
            peers = self._records.get(service_id)
            if peers is not None:
                peers.pop(replica_id, None)
                if not peers:
                    del self._records[service_id]

    def expire(self, now: float | None = None) -> list[tuple[ServiceIdentity, int]]:
        now = self.clock() if now is None else now
        with self._lock:
            evicted = []
            for sid in list(self._records):
                evicted.extend(self._evict(now, sid))
            return evicted

    def _evict(self, now: float, service_id: ServiceIdentity) -> list[tuple[ServiceIdentity, int]]:
        if self.expiry_ms is None:
            return []
        peers = self._records.get(service_id)
        if not peers:
            return []
        stale = [rid for rid, r in peers.items() if now - r.last_heartbeat > self.expiry_ms]
        for rid in stale:
            del peers[rid]
        if not peers:
            del self._records[service_id]
        return [(service_id, rid) for rid in stale]

    def records(self) -> list[PeerRecord]:
        with self._lock:
            return [r for peers in self._records.values() for r in peers.values()]

    # -- wire -------------------------------------------------------------
    def handle_frame(self, frame: bytes) -> bytes:
        """Process one request frame and return the reply frame."""
        self._require_alive()
        try:
            kind, body = decode_frame(frame)
        except WireError as exc:
            return encode_frame(MsgType.REGISTER, encode_ack(False, f"protocol-error: {exc}"))
        try:
            if kind in (MsgType.REQUEST, MsgType.RESPONSE):
                self.rejected_data_frames += 1
                return encode_frame(kind, encode_ack(False, "discovery server carries no application data"))
            if kind in (MsgType.REGISTER, MsgType.HEARTBEAT):
                info = decode_peer(body)
                self.register_peer(info.service_id, info.endpoint, info.replica_id)
                return encode_frame(kind, encode_ack())
            if kind is MsgType.DISCONNECT_REPORT:
                sid, replica = decode_disconnect(body)
                self.report_disconnect(sid, replica)
                return encode_frame(kind, encode_ack())
            # PEER_LIST query: body is the 32-byte service id
            if len(body) != 32:
                return encode_frame(kind, encode_ack(False, "protocol-error: PEER_LIST query must be 32 bytes"))
            sid = ServiceIdentity(body)
            return encode_frame(MsgType.PEER_LIST, b"\x00" + encode_peer_list(sid, self.lookup(sid)))
        except WireError as exc:
            return encode_frame(kind, encode_ack(False, f"protocol-error: {exc}"))


class ProtocolRejected(RuntimeError):
    pass


class DiscoveryClient:
    """Client side of the discovery protocol over any request/reply callable.

    ``call`` sends one frame and returns the reply frame, raising
    :class:`DiscoveryUnavailable` when the server cannot be reached. Lookup
    results are cached; proxies re-query only after link failures or pool
    change notifications.
    """

    def __init__(self, call: Callable[[bytes], bytes]):
        self._call = call
        self._cache: dict[ServiceIdentity, list[tuple[str, int]]] = {}

    @classmethod
    def local(cls, server: DiscoveryServer) -> "DiscoveryClient":
        return cls(server.handle_frame)

    def _ack(self, kind: MsgType, body: bytes) -> None:
        rkind, rbody = decode_frame(self._call(encode_frame(kind, body)))
        ok, message = decode_ack(rbody)
        if not ok:
            raise ProtocolRejected(message)

    def register(self, service_id: ServiceIdentity, endpoint: str, replica_id: int) -> None:
        self._ack(MsgType.REGISTER, encode_peer(PeerInfo(service_id, replica_id, endpoint)))

    def heartbeat(self, service_id: ServiceIdentity, endpoint: str, replica_id: int) -> None:
        self._ack(MsgType.HEARTBEAT, encode_peer(PeerInfo(service_id, replica_id, endpoint)))

    def report_disconnect(self, service_id: ServiceIdentity, replica_id: int) -> None:
        self._ack(MsgType.DISCONNECT_REPORT, encode_disconnect(service_id, replica_id))

    def lookup(self, service_id: ServiceIdentity) -> list[tuple[str, int]]:
        rkind, rbody = decode_frame(self._call(encode_frame(MsgType.PEER_LIST, service_id.id)))
        if not rbody or rbody[0] != 0:
            ok, message = decode_ack(rbody)
            raise ProtocolRejected(message)
        _, peers = decode_peer_list(rbody[1:])
        self._cache[service_id] = peers
        return peers

    def cached(self, service_id: ServiceIdentity) -> list[tuple[str, int]] | None:
        return self._cache.get(service_id)


# -- TCP ----------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: DiscoveryServer = self.server.directory  # type: ignore[attr-defined]
        decoder = FrameDecoder()
        while True:
            try:
                data = self.request.recv(65536)
            except OSError:
                return
            if not data:
                return
            try:
                frames = decoder.feed(data)
            except WireError as exc:
                self.request.sendall(encode_frame(MsgType.REGISTER, encode_ack(False, f"protocol-error: {exc}")))
                return
            for kind, body in frames:
                try:
                    reply = server.handle_frame(encode_frame(kind, body))
                except DiscoveryUnavailable:
                    return
                self.request.sendall(reply)


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class DiscoveryTcpServer:
    """Serves a :class:`DiscoveryServer` over TCP in a background thread."""

    def __init__(self, directory: DiscoveryServer, host: str = "127.0.0.1", port: int = 0):
        self.directory = directory
        self._server = _TcpServer((host, port), _Handler)
        self._server.directory = directory  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, name="discovery", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "DiscoveryTcpServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


def tcp_call(host: str, port: int, timeout_s: float = 2.0) -> Callable[[bytes], bytes]:
    """One short-lived connection per control-plane exchange."""

    def call(frame: bytes) -> bytes:
        try:
            with socket.create_connection((host, port), timeout=timeout_s) as sock:
                sock.sendall(frame)
                decoder = FrameDecoder()
                while True:
                    data = sock.recv(65536)
                    if not data:
                        raise DiscoveryUnavailable("connection closed before reply")
                    frames = decoder.feed(data)
                    if frames:
                        kind, body = frames[0]
                        return encode_frame(kind, body)
        except OSError as exc:
            raise DiscoveryUnavailable(str(exc)) from exc

    return call
