"""Proxy roles: robot-side fan-out, service-side adapter and gateway forwarder.

All three roles work on raw frames and talk to peers through :class:`PeerLink`
objects. A link only knows how to hand bytes to its transport (``send``); the
simulator and the TCP transport both plug in there, so the logic above the
seam is identical in virtual and wall-clock time.
"""
from __future__ import annotations

import concurrent.futures
import enum
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .envelope import (
    DEFAULT_MAX_FRAME,
    MsgType,
    RequestEnvelope,
    RequestId,
    RequestIdGenerator,
    ResponseEnvelope,
    ServiceIdentity,
    Status,
    WireError,
    decode_frame,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
)
from .registry import Outcome, Registry, wall_clock_ms

log = logging.getLogger(__name__)

HEARTBEAT_INTERVAL_MS = 1000.0
MISSED_HEARTBEATS = 3


class Unavailable(RuntimeError):
    """No UP link exists for the requested service."""


class LinkDown(ConnectionError):
    pass


class InvalidTopology(ValueError):
    pass


class LinkState(enum.Enum):
    CONNECTING = "connecting"
    UP = "up"
    DOWN = "down"


@dataclass(eq=False)
class PeerLink:
    """One side of a proxy-to-proxy connection."""

    service_id: ServiceIdentity
    endpoint: str
    replica_id: int
    link_state: LinkState = LinkState.CONNECTING
    send: Optional[Callable[[bytes], None]] = field(default=None, repr=False)
    heartbeat_interval_ms: float = HEARTBEAT_INTERVAL_MS
    missed_limit: int = MISSED_HEARTBEATS
    last_heard: Optional[float] = None
    suspect: bool = False
    decode_errors: int = 0
    frames_sent: int = 0

    @property
    def up(self) -> bool:
        return self.link_state is LinkState.UP

    def mark_up(self, now: float | None = None) -> None:
        self.link_state = LinkState.UP
        if now is not None:
            self.last_heard = now

    def mark_down(self) -> None:
        self.link_state = LinkState.DOWN

    def transmit(self, frame: bytes) -> None:
        if self.link_state is not LinkState.UP or self.send is None:
            raise LinkDown(f"link to {self.endpoint} is {self.link_state.value}")
        self.send(frame)
        self.frames_sent += 1

    def heard(self, now: float) -> None:
        self.last_heard = now

    def check_liveness(self, now: float) -> bool:
        """Mark the link DOWN once ``missed_limit`` heartbeat intervals pass in silence."""
        if self.link_state is LinkState.UP and self.last_heard is not None:
            if now - self.last_heard > self.missed_limit * self.heartbeat_interval_ms:
                self.link_state = LinkState.DOWN
        return self.link_state is LinkState.UP


class NodeKind(enum.Enum):
    ROBOT = "robot"
    GATEWAY = "gateway"
    REPLICA = "replica"


@dataclass(eq=False)
class TopologyNode:
    kind: NodeKind
    endpoint: str = ""
    tag: int = 0  # replica_id for replicas, a node tag for gateways
    children: list["TopologyNode"] = field(default_factory=list)
    name: str = ""

    def walk(self) -> Iterable["TopologyNode"]:
        yield self
        for child in self.children:
            yield from child.walk()


def validate_topology(root: TopologyNode) -> None:
    if root.kind is not NodeKind.ROBOT:
        raise InvalidTopology("root must be the ROBOT node")
    _check_subtree(root)


def _check_subtree(root: TopologyNode) -> None:
    seen: set[int] = set()
    stack: list[tuple[TopologyNode, int]] = [(root, 0)]
    while stack:
        node, depth = stack.pop()
        if id(node) in seen:
            raise InvalidTopology(f"node {node.name or node.endpoint!r} reached twice (cycle or shared subtree)")
        seen.add(id(node))
        if depth > 0 and node.kind is NodeKind.ROBOT:
            raise InvalidTopology("ROBOT may only appear at the root")
        if not node.children and node.kind is not NodeKind.REPLICA:
            raise InvalidTopology(f"leaf {node.name or node.endpoint!r} is not a REPLICA")
        stack.extend((c, depth + 1) for c in node.children)


def flatten_topology(root: TopologyNode, service_id: ServiceIdentity) -> list[PeerLink]:
    """Direct-dial peer set of ``root``: one CONNECTING link per direct child.

    Gateways and forwarding replicas appear as single links; the subtree behind
    them is theirs to fan out to (call this again on that node).
    """
    if root.kind is NodeKind.ROBOT:
        validate_topology(root)
    else:
        _check_subtree(root)
    return [PeerLink(service_id, child.endpoint, child.tag) for child in root.children]


class RobotProxy:
    """Robot-side proxy: fans every request out and delivers the first response."""

    def __init__(
        self,
        clock: Callable[[], float] = wall_clock_ms,
        ids: RequestIdGenerator | None = None,
        registry: Registry | None = None,
        max_frame: int = DEFAULT_MAX_FRAME,
        wait: Callable[[threading.Event, float], None] | None = None,
        arm_timer: Callable[[float], None] | None = None,
    ):
        self.clock = clock
        self.ids = ids or RequestIdGenerator()
        self.registry = registry or Registry(clock)
        self.max_frame = max_frame
        self._wait = wait or self._wall_wait
        self._arm_timer = arm_timer
        self._links: dict[ServiceIdentity, list[PeerLink]] = {}
        self._links_lock = threading.Lock()
        self.decode_errors = 0
        self.duplicates = 0
        self.unknown = 0
        self.protocol_errors = 0

    # -- link table ------------------------------------------------------
    def add_link(self, link: PeerLink) -> None:
        with self._links_lock:
            self._links.setdefault(link.service_id, []).append(link)

    def remove_link(self, link: PeerLink) -> None:
        with self._links_lock:
            links = self._links.get(link.service_id, [])
            if link in links:
                links.remove(link)

    def links(self, service_id: ServiceIdentity) -> list[PeerLink]:
        with self._links_lock:
            return list(self._links.get(service_id, []))

    def up_links(self, service_id: ServiceIdentity) -> list[PeerLink]:
        return [link for link in self.links(service_id) if link.up]

    # -- request path ----------------------------------------------------
    def send_request(
        self,
        payload: bytes,
        service_id: ServiceIdentity,
        timeout_ms: float,
        on_done: Callable[[ResponseEnvelope], None],
    ) -> RequestId:
        """Fan ``payload`` out to every UP link; ``on_done`` fires exactly once."""
        links = self.up_links(service_id)
        if not links:
            raise Unavailable(f"no UP links for service {service_id}")
        rid = self.ids.next()
        deadline_ms = int(timeout_ms) if timeout_ms > 0 else 0
        frame = encode_request(RequestEnvelope(rid, service_id, deadline_ms, payload), self.max_frame)
        deadline_at = self.clock() + timeout_ms if timeout_ms > 0 else float("inf")
        self.registry.register(rid, deadline_at, on_done, on_done)
        if self._arm_timer is not None and timeout_ms > 0:
            self._arm_timer(deadline_at)
        for link in links:
            try:
                link.transmit(frame)
            except (LinkDown, OSError) as exc:
                log.debug("send to %s failed: %s", link.endpoint, exc)
                link.mark_down()
        return rid

    def submit_request(self, payload: bytes, service_id: ServiceIdentity, timeout_ms: float) -> ResponseEnvelope:
        """Blocking call: the first response, or a TIMEOUT_SYNTHETIC envelope."""
        box: list[ResponseEnvelope] = []
        done = threading.Event()

        def on_done(env: ResponseEnvelope) -> None:
            box.append(env)
            done.set()

        self.send_request(payload, service_id, timeout_ms, on_done)
        self._wait(done, self.clock() + timeout_ms if timeout_ms > 0 else float("inf"))
        return box[0]

    def _wall_wait(self, done: threading.Event, deadline_at: float) -> None:
        while not done.is_set():
            remaining = deadline_at - self.clock()
            if remaining <= 0:
                self.registry.expire(self.clock())
                # a racing complete() may own the entry; it sets the event itself
                done.wait(0.05)
                continue
            done.wait(min(remaining / 1000.0, 1.0))

    def handle_inbound(self, frame: bytes, origin: PeerLink) -> None:
        try:
            kind, body = decode_frame(frame)
            if kind is MsgType.RESPONSE:
                env = decode_response(body)
        except WireError as exc:
            origin.suspect = True
            origin.decode_errors += 1
            self.decode_errors += 1
            log.warning("dropping undecodable frame from %s: %s", origin.endpoint, exc)
            return
        origin.heard(self.clock())
        if kind is MsgType.RESPONSE:
            outcome = self.registry.complete(env)
            if outcome is Outcome.DUPLICATE:
                self.duplicates += 1
            elif outcome is Outcome.UNKNOWN:
                self.unknown += 1
        elif kind is not MsgType.HEARTBEAT:
            self.protocol_errors += 1


@dataclass
class LocalService:
    service_id: ServiceIdentity
    handler: Callable[[bytes], bytes]


Executor = Callable[[Callable[[], bytes], Callable[[Status, bytes], None]], None]


def thread_pool_executor(max_workers: int | None = None) -> Executor:
    """Run handlers on a worker pool so one slow call cannot starve heartbeats."""
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=max_workers or os.cpu_count() or 1)

    def run(work: Callable[[], bytes], done: Callable[[Status, bytes], None]) -> None:
        def task():
            try:
                result = work()
            except Exception as exc:  # handler failures become SERVICE_ERROR
                done(Status.SERVICE_ERROR, repr(exc).encode("utf-8", "replace"))
            else:
                done(Status.OK, result)

        pool.submit(task)

    run.shutdown = pool.shutdown  # type: ignore[attr-defined]
    return run


class Direction(enum.Enum):
    DOWNSTREAM = "downstream"
    UPSTREAM = "upstream"


class Gateway:
    """Relays requests to every UP child and responses to the parent, unmodified.

    No deduplication happens here; the robot registry does it.
    """

    def __init__(self, parent: PeerLink | None = None, children: Iterable[PeerLink] = (), name: str = "gateway"):
        self.parent = parent
        self.children: list[PeerLink] = list(children)
        self.name = name
        self.forwarded_down = 0
        self.relayed_up = 0
        self.dropped = 0
        self.decode_errors = 0

    def up_children(self) -> list[PeerLink]:
        return [c for c in self.children if c.up]

    def handle_inbound(self, frame: bytes, origin: PeerLink) -> None:
        try:
            kind, _ = decode_frame(frame)
        except WireError as exc:
            origin.suspect = True
            origin.decode_errors += 1
            self.decode_errors += 1
            log.warning("%s: dropping undecodable frame: %s", self.name, exc)
            return
        if kind is MsgType.REQUEST:
            self.gateway_forward(frame, Direction.DOWNSTREAM)
        elif kind is MsgType.RESPONSE:
            self.gateway_forward(frame, Direction.UPSTREAM)

    def gateway_forward(self, frame: bytes, direction: Direction) -> None:
        if direction is Direction.DOWNSTREAM:
            targets = self.up_children()
            if not targets:
                self.dropped += 1
                log.warning("%s: no UP children, request dropped", self.name)
                return
            for child in targets:
                try:
                    child.transmit(frame)
                    self.forwarded_down += 1
                except (LinkDown, OSError):
                    child.mark_down()
        else:
            if self.parent is None:
                self.dropped += 1
                return
            try:
                self.parent.transmit(frame)
                self.relayed_up += 1
            except (LinkDown, OSError):
                self.dropped += 1
                log.warning("%s: parent unreachable, response dropped", self.name)


class ReplicaAdapter:
    """Service-side proxy: turns REQUEST frames into handler calls.

    A replica with ``children`` also forwards each request to them and relays
    their responses back upstream (the compute-server-as-gateway layout).
    """

    def __init__(
        self,
        service: LocalService,
        replica_id: int,
        executor: Executor | None = None,
        children: Iterable[PeerLink] = (),
        parent: PeerLink | None = None,
        max_frame: int = DEFAULT_MAX_FRAME,
    ):
        self.service = service
        self.replica_id = replica_id
        self.executor = executor or thread_pool_executor()
        self.forwarder = Gateway(parent, children, name=f"replica-{replica_id}")
        self.max_frame = max_frame
        self.served = 0
        self.decode_errors = 0
        self.misrouted = 0

    @property
    def children(self) -> list[PeerLink]:
        return self.forwarder.children

    def handle_inbound(self, frame: bytes, origin: PeerLink) -> None:
        try:
            kind, body = decode_frame(frame)
            if kind is MsgType.REQUEST:
                env = decode_request(body)
        except WireError as exc:
            origin.suspect = True
            origin.decode_errors += 1
            self.decode_errors += 1
            log.warning("replica %d: dropping undecodable frame: %s", self.replica_id, exc)
            return
        if kind is MsgType.RESPONSE:
            self.forwarder.gateway_forward(frame, Direction.UPSTREAM)
            return
        if kind is not MsgType.REQUEST:
            return
        if env.service_id != self.service.service_id:
            self.misrouted += 1
            return
        if self.forwarder.children:
            self.forwarder.gateway_forward(frame, Direction.DOWNSTREAM)

        def done(status: Status, payload: bytes) -> None:
            self.served += 1
            reply = encode_response(ResponseEnvelope(env.request_id, self.replica_id, status, payload), self.max_frame)
            try:
                origin.transmit(reply)
            except (LinkDown, OSError):
                log.debug("replica %d: requester gone", self.replica_id)

        handler = self.service.handler
        self.executor(lambda: handler(env.payload), done)
