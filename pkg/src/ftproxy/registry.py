"""Pending-request table of the robot-side proxy.

Every registered request resolves exactly once: either the first response
reaches ``on_response`` or the deadline passes and ``on_timeout`` fires with a
synthetic empty response. Resolved ids are remembered as tombstones for a
retention window so late duplicates can be told apart from strangers.
"""
from __future__ import annotations

import enum
import heapq
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

from .envelope import RequestId, ResponseEnvelope, Status

DEFAULT_RETENTION_MS = 60_000.0

ResponseAction = Callable[[ResponseEnvelope], None]


class DuplicateRegistration(KeyError):
    pass


class EntryState(enum.Enum):
    PENDING = "pending"
    COMPLETED = "completed"
    TIMED_OUT = "timed_out"


class Outcome(enum.Enum):
    DELIVERED = "delivered"
    DUPLICATE = "duplicate"
    UNKNOWN = "unknown"


@dataclass
class PendingEntry:
    request_id: RequestId
    registered_at: float
    deadline_at: float
    on_response: ResponseAction
    on_timeout: ResponseAction
    state: EntryState = EntryState.PENDING


def wall_clock_ms() -> float:
    return time.monotonic() * 1000.0


def timeout_response(request_id: RequestId) -> ResponseEnvelope:
    return ResponseEnvelope(request_id, 0, Status.TIMEOUT_SYNTHETIC, b"")


class Registry:
    """Thread-safe table of PENDING entries keyed by request id.

    ``clock`` returns the current time in milliseconds; it is only used to stamp
    registrations and tombstones. Expiry is driven by the ``now`` passed to
    :meth:`expire`, so virtual and wall time share this code.
    Callbacks always run after the internal lock is released.
    """

    def __init__(self, clock: Callable[[], float] = wall_clock_ms,
                 retention_ms: float = DEFAULT_RETENTION_MS):
        self.clock = clock
        self.retention_ms = retention_ms
        self._lock = threading.Lock()
        self._entries: dict[RequestId, PendingEntry] = {}
        self._deadlines: list[tuple[float, int, RequestId]] = []
        self._tie = 0
        # insertion order == resolution order, so purging pops from the front
        self._tombstones: OrderedDict[RequestId, float] = OrderedDict()
        self.delivered = 0
        self.duplicates = 0
        self.unknown = 0
        self.timed_out = 0

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def __contains__(self, request_id: RequestId) -> bool:
        with self._lock:
            return request_id in self._entries

    @property
    def tombstone_count(self) -> int:
        with self._lock:
            return len(self._tombstones)

    def entry(self, request_id: RequestId) -> PendingEntry | None:
        with self._lock:
            return self._entries.get(request_id)

    def register(self, request_id: RequestId, deadline_at: float,
                 on_response: ResponseAction, on_timeout: ResponseAction) -> None:
        now = self.clock()
        with self._lock:
            if request_id in self._entries or request_id in self._tombstones:
                raise DuplicateRegistration(f"request {request_id} already registered")
            self._entries[request_id] = PendingEntry(request_id, now, deadline_at, on_response, on_timeout)
            self._tie += 1
            heapq.heappush(self._deadlines, (deadline_at, self._tie, request_id))

    def complete(self, response: ResponseEnvelope) -> Outcome:
        rid = response.request_id
        now = self.clock()
        with self._lock:
            self._purge(now)
            entry = self._entries.pop(rid, None)
            if entry is None:
                if rid in self._tombstones:
                    self.duplicates += 1
                    return Outcome.DUPLICATE
                self.unknown += 1
                return Outcome.UNKNOWN
            entry.state = EntryState.COMPLETED
            self._tombstones[rid] = now
            self.delivered += 1
        entry.on_response(response)
        return Outcome.DELIVERED

    def expire(self, now: float) -> list[RequestId]:
        """Time out every pending entry whose deadline is at or before ``now``."""
        fired: list[PendingEntry] = []
        with self._lock:
            while self._deadlines and self._deadlines[0][0] <= now:
                _, _, rid = heapq.heappop(self._deadlines)
                entry = self._entries.pop(rid, None)
                if entry is None:  # completed earlier; stale heap slot
                    continue
                entry.state = EntryState.TIMED_OUT
                self._tombstones[rid] = now
                fired.append(entry)
            self.timed_out += len(fired)
            self._purge(now)
        for entry in fired:
            entry.on_timeout(timeout_response(entry.request_id))
        return [e.request_id for e in fired]

    def next_deadline(self) -> float | None:
        with self._lock:
            while self._deadlines and self._deadlines[0][2] not in self._entries:
                heapq.heappop(self._deadlines)
            return self._deadlines[0][0] if self._deadlines else None

    def purge(self, now: float) -> None:
        with self._lock:
            self._purge(now)

    def _purge(self, now: float) -> None:
        cutoff = now - self.retention_ms
        tomb = self._tombstones
        while tomb:
            rid, at = next(iter(tomb.items()))
            if at > cutoff:
                break
            tomb.popitem(last=False)
        if not self._entries and self._deadlines:
            self._deadlines.clear()
