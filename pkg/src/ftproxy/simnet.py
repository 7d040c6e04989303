"""Virtual-time event loop and in-memory channels for simulation mode."""
from __future__ import annotations

import heapq
import itertools
import threading
from typing import Any, Callable, Protocol

from .envelope import ServiceIdentity
from .proxy import PeerLink


class Handle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventLoop:
    """Single-threaded event heap keyed by (time, priority, insertion order).

    Priority breaks exact-time ties: control-plane work (pool monitor ticks,
    injected faults) runs at ``CONTROL`` before data-plane deliveries at the
    same instant, so a request never sees a half-applied pool change.
    """

    CONTROL = 0
    DATA = 1

    def __init__(self, start: float = 0.0):
        self.now = start
        self._heap: list[tuple[float, int, int, Handle, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()
        self.processed = 0

    def clock(self) -> float:
        return self.now

    def call_at(self, when: float, fn: Callable[..., Any], *args: Any, priority: int = DATA) -> Handle:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        handle = Handle()
        heapq.heappush(self._heap, (when, priority, next(self._seq), handle, fn, args))
        return handle

    def call_later(self, delay: float, fn: Callable[..., Any], *args: Any, priority: int = DATA) -> Handle:
        return self.call_at(self.now + max(delay, 0.0), fn, *args, priority=priority)

    def __len__(self) -> int:
        return len(self._heap)

    def peek(self) -> float | None:
        while self._heap and self._heap[0][3].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        while self._heap:
            when, _, _, handle, fn, args = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            self.now = when
            self.processed += 1
            fn(*args)
            return True
        return False

    def run(self, until: float | None = None) -> None:
        while True:
            nxt = self.peek()
            if nxt is None or (until is not None and nxt > until):
                break
            self.step()
        if until is not None and until > self.now:
            self.now = until

    def run_until(self, predicate: Callable[[], bool], limit: float | None = None) -> bool:
        while not predicate():
            nxt = self.peek()
            if nxt is None or (limit is not None and nxt > limit):
                return predicate()
            self.step()
        return True

    def wait(self, done: threading.Event, deadline_at: float) -> None:
        """``RobotProxy`` waiter: advance virtual time until ``done`` is set."""
        self.run_until(done.is_set)


class Inbound(Protocol):
    def handle_inbound(self, frame: bytes, origin: PeerLink) -> None: ...


LatencyFn = Callable[[], float]


def connect(
    loop: EventLoop,
    a: Inbound,
    b: Inbound,
    service_id: ServiceIdentity,
    a_to_b: LatencyFn,
    b_to_a: LatencyFn,
    *,
    b_endpoint: str,
    a_endpoint: str,
    b_tag: int = 0,
    a_tag: int = 0,
) -> tuple[PeerLink, PeerLink]:
    """Join two nodes with a duplex channel; returns (link held by a, link held by b).

    Frames sent on a link arrive at the far node after the per-direction
    latency sampled at send time. Frames in flight when the far link goes DOWN
    are still delivered only if the receiving node chooses to accept them.
    """
    link_a = PeerLink(service_id, b_endpoint, b_tag)
    link_b = PeerLink(service_id, a_endpoint, a_tag)

    def send_ab(frame: bytes) -> None:
        loop.call_later(a_to_b(), b.handle_inbound, frame, link_b)

    def send_ba(frame: bytes) -> None:
        loop.call_later(b_to_a(), a.handle_inbound, frame, link_a)

    link_a.send = send_ab
    link_b.send = send_ba
    link_a.mark_up(loop.now)
    link_b.mark_up(loop.now)
    return link_a, link_b


def zero() -> float:
    return 0.0
