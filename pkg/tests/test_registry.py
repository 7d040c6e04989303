import random
import threading

import pytest
from hypothesis import given, strategies as st

from ftproxy.envelope import RequestId, ResponseEnvelope, Status
from ftproxy.registry import DuplicateRegistration, EntryState, Outcome, Registry


class Clock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def resp(seq, replica=1):
    return ResponseEnvelope(RequestId(1, seq), replica, Status.OK, b"r")


def make():
    clock = Clock()
    return clock, Registry(clock, retention_ms=100.0)


def test_first_response_wins():
    clock, reg = make()
    got = []
    reg.register(RequestId(1, 1), 50.0, got.append, got.append)
    assert reg.complete(resp(1, 2)) is Outcome.DELIVERED
    assert reg.complete(resp(1, 3)) is Outcome.DUPLICATE
    assert [g.replica_id for g in got] == [2]
    assert reg.duplicates == 1 and reg.delivered == 1


def test_timeout_then_late_response_is_duplicate():
    clock, reg = make()
    got = []
    reg.register(RequestId(1, 1), 50.0, got.append, got.append)
    assert reg.expire(49.9) == []
    assert reg.expire(50.0) == [RequestId(1, 1)]
    assert got[0].status is Status.TIMEOUT_SYNTHETIC and got[0].payload == b""
    assert reg.complete(resp(1)) is Outcome.DUPLICATE
    assert len(got) == 1


def test_unknown_response():
    clock, reg = make()
    assert reg.complete(resp(99)) is Outcome.UNKNOWN
    assert reg.unknown == 1


def test_tombstones_purged_after_retention():
    clock, reg = make()
    reg.register(RequestId(1, 1), 10.0, lambda r: None, lambda r: None)
    reg.complete(resp(1))
    assert reg.tombstone_count == 1
    clock.t = 100.0
    reg.purge(clock.t)
    assert reg.tombstone_count == 0
    assert reg.complete(resp(1)) is Outcome.UNKNOWN


def test_duplicate_registration():
    clock, reg = make()
    reg.register(RequestId(1, 1), 10.0, lambda r: None, lambda r: None)
    with pytest.raises(DuplicateRegistration):
        reg.register(RequestId(1, 1), 10.0, lambda r: None, lambda r: None)
    reg.complete(resp(1))
    with pytest.raises(DuplicateRegistration):
        reg.register(RequestId(1, 1), 10.0, lambda r: None, lambda r: None)


def test_next_deadline_skips_completed():
    clock, reg = make()
    reg.register(RequestId(1, 1), 10.0, lambda r: None, lambda r: None)
    reg.register(RequestId(1, 2), 20.0, lambda r: None, lambda r: None)
    assert reg.next_deadline() == 10.0
    reg.complete(resp(1))
    assert reg.next_deadline() == 20.0
    assert reg.entry(RequestId(1, 2)).state is EntryState.PENDING


def test_callback_may_reenter_registry():
    clock, reg = make()

    def chain(r):
        reg.register(RequestId(1, 2), 10.0, lambda r: None, lambda r: None)

    reg.register(RequestId(1, 1), 10.0, chain, chain)
    reg.complete(resp(1))
    assert RequestId(1, 2) in reg


@given(st.integers(2, 8), st.integers(1, 30), st.randoms(use_true_random=False))
def test_exactly_once_under_random_interleaving(n_replicas, n_requests, rnd):
    clock, reg = make()
    calls = {}

    def cb(env):
        calls[env.request_id] = calls.get(env.request_id, 0) + 1

    for s in range(n_requests):
        reg.register(RequestId(1, s), rnd.uniform(1, 50), cb, cb)
    events = [("resp", s, r) for s in range(n_requests) for r in range(n_replicas)]
    events += [("tick", None, None)] * 10
    rnd.shuffle(events)
    for kind, s, r in events:
        if kind == "resp":
            reg.complete(resp(s, r))
        else:
            clock.t += rnd.uniform(0, 10)
            reg.expire(clock.t)
    reg.expire(float("inf"))
    assert calls == {RequestId(1, s): 1 for s in range(n_requests)}
    assert reg.delivered + reg.timed_out == n_requests
    assert len(reg) == 0


def test_exactly_once_with_threads():
    clock, reg = make()
    n = 2000
    counts = [0] * n
    lock = threading.Lock()

    def cb(env):
        with lock:
            counts[env.request_id.sequence] += 1

    for s in range(n):
        reg.register(RequestId(1, s), 5.0, cb, cb)

    def responder(seed):
        rnd = random.Random(seed)
        order = list(range(n))
        rnd.shuffle(order)
        for s in order:
            reg.complete(resp(s, seed))

    def expirer():
        for _ in range(50):
            reg.expire(5.0)

    threads = [threading.Thread(target=responder, args=(i,)) for i in range(4)] + [threading.Thread(target=expirer)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert counts == [1] * n
