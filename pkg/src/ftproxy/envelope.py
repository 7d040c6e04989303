"""Message identities and the framed wire format shared by every proxy.

Byte layouts are documented in ``docs/WIRE_FORMAT.md``.
"""
from __future__ import annotations

import enum
import hashlib
import itertools
import secrets
import struct
import threading
from dataclasses import dataclass
from typing import BinaryIO, Union

MAGIC = b"\xf6\x2f"
VERSION = 0x01
HEADER = struct.Struct("!2sBBI")
HEADER_LEN = HEADER.size  # 8
MAX_BODY = 2**32 - 1
DEFAULT_MAX_FRAME = 16 * 1024 * 1024


class WireError(Exception):
    """Base class for codec failures."""


class ProtocolError(WireError):
    pass


class VersionMismatch(ProtocolError):
    pass


class FrameTooLarge(WireError, ValueError):
    pass


class NeedMoreBytes(WireError):
    """Not enough buffered bytes for a whole frame. Nothing was consumed."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


class MsgType(enum.IntEnum):
    REQUEST = 1
    RESPONSE = 2
    HEARTBEAT = 3
    REGISTER = 4
    PEER_LIST = 5
    DISCONNECT_REPORT = 6


class Status(enum.IntEnum):
    OK = 0
    SERVICE_ERROR = 1
    # fabricated locally by the robot proxy; never encoded
    TIMEOUT_SYNTHETIC = 2


@dataclass(frozen=True)
class ServiceIdentity:
    id: bytes

    def __post_init__(self):
        if len(self.id) != 32:
            raise ValueError("service identity must be 32 bytes")

    @property
    def hex(self) -> str:
        return self.id.hex()

    def __str__(self) -> str:
        return self.id.hex()[:16]


def derive_service_identity(
    service_name: str, credential_fingerprint: bytes, protocol_version: int
) -> ServiceIdentity:
    """SHA-256 over the three inputs, each prefixed by its 4-byte big-endian length.

    The version is encoded as an unsigned 64-bit big-endian integer. Relaunched
    replicas recompute the same value, so peers can find them again.
    """
    if not service_name:
        raise ValueError("service_name must be non-empty")
    if len(credential_fingerprint) != 32:
        raise ValueError("credential_fingerprint must be 32 bytes")
    if protocol_version < 0:
        raise ValueError("protocol_version must be unsigned")
    name = service_name.encode("utf-8")
    version = struct.pack("!Q", protocol_version)
    h = hashlib.sha256()
    for field in (name, bytes(credential_fingerprint), version):
        h.update(struct.pack("!I", len(field)))
        h.update(field)
    return ServiceIdentity(h.digest())


@dataclass(frozen=True, order=True)
class RequestId:
    client_guid: int
    sequence: int

    def to_bytes(self) -> bytes:
        return struct.pack("!QQ", self.client_guid, self.sequence)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RequestId":
        return cls(*struct.unpack("!QQ", raw))

    def __str__(self) -> str:
        return f"{self.client_guid:016x}-{self.sequence}"


class RequestIdGenerator:
    """Per-proxy id source: one random GUID plus a counter guarded by a lock."""

    def __init__(self, client_guid: int | None = None, start: int = 1):
        if client_guid is None:
            client_guid = secrets.randbits(64)
        if not 0 <= client_guid < 2**64:
            raise ValueError("client_guid must fit in 64 bits")
        self.client_guid = client_guid
        self._counter = itertools.count(start)
        self._lock = threading.Lock()

    def next(self) -> RequestId:
        with self._lock:
            seq = next(self._counter)
        return RequestId(self.client_guid, seq)


@dataclass(frozen=True)
class RequestEnvelope:
    request_id: RequestId
    service_id: ServiceIdentity
    deadline_ms: int
    payload: bytes


@dataclass(frozen=True)
class ResponseEnvelope:
    request_id: RequestId
    replica_id: int
    status: Status
    payload: bytes


def encode_frame(msg_type: int, body: bytes, max_body: int = MAX_BODY) -> bytes:
    if len(body) > min(max_body, MAX_BODY):
        raise FrameTooLarge(f"body of {len(body)} bytes exceeds limit {min(max_body, MAX_BODY)}")
    return HEADER.pack(MAGIC, VERSION, int(msg_type), len(body)) + bytes(body)


def _check_header(header: bytes) -> tuple[MsgType, int]:
    magic, version, msg_type, body_len = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic.hex()}")
    if version != VERSION:
        raise VersionMismatch(f"unsupported version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown msg_type {msg_type}") from None
    return kind, body_len


ByteSource = Union[bytes, bytearray, memoryview, BinaryIO]


def decode_frame(stream: ByteSource, max_body: int = MAX_BODY) -> tuple[MsgType, bytes]:
    """Decode one frame from ``stream``.

    A ``bytearray`` is consumed in place: exactly one frame is removed from its
    front, and on ``NeedMoreBytes`` it is left untouched so the caller can append
    more data and retry. ``bytes``/``memoryview`` input must start with a frame;
    trailing bytes are ignored. Objects with ``read`` are read from directly.
    """
    if hasattr(stream, "read"):
        header = stream.read(HEADER_LEN)
        if len(header) < HEADER_LEN:
            raise NeedMoreBytes(HEADER_LEN - len(header))
        kind, body_len = _check_header(header)
        if body_len > max_body:
            raise FrameTooLarge(f"declared body of {body_len} bytes exceeds limit {max_body}")
        body = stream.read(body_len)
        if len(body) < body_len:
            raise NeedMoreBytes(body_len - len(body))
        return kind, bytes(body)

    view = memoryview(stream)
    if len(view) < HEADER_LEN:
        # a wrong first byte is fatal even before the header is complete
        if len(view) and view[0] != MAGIC[0]:
            raise ProtocolError(f"bad magic byte {view[0]:#04x}")
        raise NeedMoreBytes(HEADER_LEN - len(view))
    kind, body_len = _check_header(bytes(view[:HEADER_LEN]))
    if body_len > max_body:
        raise FrameTooLarge(f"declared body of {body_len} bytes exceeds limit {max_body}")
    end = HEADER_LEN + body_len
    if len(view) < end:
        raise NeedMoreBytes(end - len(view))
    body = bytes(view[HEADER_LEN:end])
    view.release()
    if isinstance(stream, bytearray):
        del stream[:end]
    return kind, body


class FrameDecoder:
    """Incremental decoder for byte streams that arrive in arbitrary chunks."""

    def __init__(self, max_body: int = MAX_BODY):
        self._buf = bytearray()
        self.max_body = max_body

    def feed(self, data: bytes) -> list[tuple[MsgType, bytes]]:
        self._buf += data
        frames = []
        while True:
            try:
                frames.append(decode_frame(self._buf, self.max_body))
            except NeedMoreBytes:
                return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- envelope bodies --------------------------------------------------------

_REQ = struct.Struct("!QQ32sII")
_RESP = struct.Struct("!QQQBI")


def encode_request(env: RequestEnvelope, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    if len(env.payload) > max_frame:
        raise FrameTooLarge(f"payload of {len(env.payload)} bytes exceeds max frame {max_frame}")
    rid = env.request_id
    body = _REQ.pack(rid.client_guid, rid.sequence, env.service_id.id, env.deadline_ms, len(env.payload))
    return encode_frame(MsgType.REQUEST, body + env.payload)


def decode_request(body: bytes) -> RequestEnvelope:
    if len(body) < _REQ.size:
        raise ProtocolError("short REQUEST body")
    guid, seq, sid, deadline, plen = _REQ.unpack_from(body)
    if len(body) != _REQ.size + plen:
        raise ProtocolError("REQUEST payload length mismatch")
    return RequestEnvelope(RequestId(guid, seq), ServiceIdentity(sid), deadline, body[_REQ.size:])


def encode_response(env: ResponseEnvelope, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    if env.status == Status.TIMEOUT_SYNTHETIC:
        raise ProtocolError("TIMEOUT_SYNTHETIC responses are local only")
    if len(env.payload) > max_frame:
        raise FrameTooLarge(f"payload of {len(env.payload)} bytes exceeds max frame {max_frame}")
    rid = env.request_id
    body = _RESP.pack(rid.client_guid, rid.sequence, env.replica_id, int(env.status), len(env.payload))
    return encode_frame(MsgType.RESPONSE, body + env.payload)


def decode_response(body: bytes) -> ResponseEnvelope:
    if len(body) < _RESP.size:
        raise ProtocolError("short RESPONSE body")
    guid, seq, replica, status, plen = _RESP.unpack_from(body)
    if len(body) != _RESP.size + plen:
        raise ProtocolError("RESPONSE payload length mismatch")
    if status not in (Status.OK, Status.SERVICE_ERROR):
        raise ProtocolError(f"status {status} is not valid on the wire")
    return ResponseEnvelope(RequestId(guid, seq), replica, Status(status), body[_RESP.size:])


def request_id_of(body: bytes) -> RequestId:
    """Read the request id from a REQUEST or RESPONSE body without a full decode."""
    if len(body) < 16:
        raise ProtocolError("body too short to carry a request id")
    return RequestId.from_bytes(body[:16])


# -- control-plane bodies (discovery) --------------------------------------

_PEER = struct.Struct("!32sQH")


@dataclass(frozen=True)
class PeerInfo:
    service_id: ServiceIdentity
    replica_id: int
    endpoint: str


def encode_peer(info: PeerInfo) -> bytes:
    ep = info.endpoint.encode("utf-8")
    if len(ep) > 0xFFFF:
        raise FrameTooLarge("endpoint too long")
    return _PEER.pack(info.service_id.id, info.replica_id, len(ep)) + ep


def decode_peer(body: bytes) -> PeerInfo:
    if len(body) < _PEER.size:
        raise ProtocolError("short peer body")
    sid, replica, eplen = _PEER.unpack_from(body)
    if len(body) != _PEER.size + eplen:
        raise ProtocolError("peer endpoint length mismatch")
    try:
        endpoint = body[_PEER.size:].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError("endpoint is not utf-8") from exc
    return PeerInfo(ServiceIdentity(sid), replica, endpoint)


def encode_disconnect(service_id: ServiceIdentity, replica_id: int) -> bytes:
    return struct.pack("!32sQ", service_id.id, replica_id)


def decode_disconnect(body: bytes) -> tuple[ServiceIdentity, int]:
    if len(body) != 40:
        raise ProtocolError("DISCONNECT_REPORT body must be 40 bytes")
    sid, replica = struct.unpack("!32sQ", body)
    return ServiceIdentity(sid), replica


def encode_peer_list(service_id: ServiceIdentity, peers: list[tuple[str, int]]) -> bytes:
    parts = [struct.pack("!32sH", service_id.id, len(peers))]
    for endpoint, replica_id in peers:
        ep = endpoint.encode("utf-8")
        parts.append(struct.pack("!QH", replica_id, len(ep)) + ep)
    return b"".join(parts)


def decode_peer_list(body: bytes) -> tuple[ServiceIdentity, list[tuple[str, int]]]:
    if len(body) < 34:
        raise ProtocolError("short PEER_LIST body")
    sid, count = struct.unpack_from("!32sH", body)
    off = 34
    peers = []
    for _ in range(count):
        if len(body) < off + 10:
            raise ProtocolError("truncated PEER_LIST entry")
        replica, eplen = struct.unpack_from("!QH", body, off)
        off += 10
        if len(body) < off + eplen:
            raise ProtocolError("truncated PEER_LIST endpoint")
        peers.append((body[off:off + eplen].decode("utf-8"), replica))
        off += eplen
    if off != len(body):
        raise ProtocolError("trailing bytes in PEER_LIST")
    return ServiceIdentity(sid), peers


ACK_OK = 0
ACK_ERROR = 1


def encode_ack(ok: bool = True, message: str = "") -> bytes:
    msg = message.encode("utf-8")[:0xFFFF]
    return struct.pack("!BH", ACK_OK if ok else ACK_ERROR, len(msg)) + msg


def decode_ack(body: bytes) -> tuple[bool, str]:
    if len(body) < 3:
        raise ProtocolError("short ack body")
    code, mlen = struct.unpack_from("!BH", body)
    return code == ACK_OK, body[3:3 + mlen].decode("utf-8", "replace")
