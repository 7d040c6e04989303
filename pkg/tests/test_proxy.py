import hashlib

import pytest

from ftproxy.envelope import (
    FrameTooLarge,
    MsgType,
    RequestEnvelope,
    RequestId,
    RequestIdGenerator,
    ResponseEnvelope,
    Status,
    decode_frame,
    derive_service_identity,
    encode_frame,
    encode_request,
    encode_response,
)
from ftproxy.proxy import (
    Direction,
    Gateway,
    InvalidTopology,
    LinkDown,
    LinkState,
    LocalService,
    NodeKind,
    PeerLink,
    ReplicaAdapter,
    RobotProxy,
    TopologyNode,
    Unavailable,
    flatten_topology,
    thread_pool_executor,
)
from ftproxy.simnet import EventLoop, connect, zero

SID = derive_service_identity("svc", bytes(32), 1)
OTHER = derive_service_identity("other", bytes(32), 1)


def inline(work, done):
    done(Status.OK, work())


class Delayed:
    """Executor that finishes after a fixed virtual delay."""

    def __init__(self, loop, delay):
        self.loop, self.delay = loop, delay

    def __call__(self, work, done):
        self.loop.call_later(self.delay, lambda: done(Status.OK, work()))


def fixed(ms):
    return lambda: ms


def build(delays, net=0.0, timeout_arm=True):
    loop = EventLoop()
    robot = RobotProxy(clock=loop.clock, ids=RequestIdGenerator(1), wait=loop.wait,
                       arm_timer=(lambda d: loop.call_at(d, robot.registry.expire, d)) if timeout_arm else None)
    replicas = []
    for i, d in enumerate(delays, start=1):
        rep = ReplicaAdapter(LocalService(SID, lambda p: p[::-1]), i, executor=Delayed(loop, d))
        link, _ = connect(loop, robot, rep, SID, fixed(net), fixed(net), b_endpoint=f"r{i}", a_endpoint="robot", b_tag=i)
        robot.add_link(link)
        replicas.append(rep)
    return loop, robot, replicas


class TestRobotProxy:
    def test_first_response_wins_and_duplicate_dropped(self):
        loop, robot, reps = build([30.0, 10.0, 20.0])
        env = robot.submit_request(b"abc", SID, 1000)
        assert env.status is Status.OK and env.payload == b"cba"
        assert env.replica_id == 2
        assert loop.now == 10.0
        loop.run()
        assert robot.duplicates == 2
        assert robot.registry.delivered == 1

    def test_timeout_synthesised(self):
        loop, robot, reps = build([500.0])
        env = robot.submit_request(b"abc", SID, 100)
        assert env.status is Status.TIMEOUT_SYNTHETIC and env.payload == b""
        assert loop.now == 100.0
        loop.run()
        assert robot.duplicates == 1

    def test_unavailable_without_links(self):
        loop, robot, _ = build([])
        with pytest.raises(Unavailable):
            robot.send_request(b"x", SID, 10, lambda e: None)

    def test_unavailable_for_other_service(self):
        loop, robot, _ = build([1.0])
        with pytest.raises(Unavailable):
            robot.send_request(b"x", OTHER, 10, lambda e: None)

    def test_down_links_skipped(self):
        loop, robot, reps = build([5.0, 50.0])
        robot.links(SID)[0].mark_down()
        env = robot.submit_request(b"x", SID, 1000)
        assert env.replica_id == 2

    def test_oversize_payload(self):
        loop, robot, _ = build([1.0])
        robot.max_frame = 8
        with pytest.raises(FrameTooLarge):
            robot.send_request(b"x" * 9, SID, 10, lambda e: None)

    def test_garbage_frame_marks_link_suspect(self):
        loop, robot, _ = build([1.0])
        link = robot.links(SID)[0]
        robot.handle_inbound(b"\x00garbage", link)
        assert link.suspect and robot.decode_errors == 1

    def test_unknown_response_counted(self):
        loop, robot, _ = build([1.0])
        frame = encode_response(ResponseEnvelope(RequestId(9, 9), 1, Status.OK, b""))
        robot.handle_inbound(frame, robot.links(SID)[0])
        assert robot.unknown == 1

    def test_ids_unique(self):
        loop, robot, _ = build([1.0, 2.0])
        ids = {robot.send_request(b"x", SID, 100, lambda e: None) for _ in range(50)}
        assert len(ids) == 50

    def test_wall_clock_mode_with_threads(self):
        robot = RobotProxy()
        rep = ReplicaAdapter(LocalService(SID, lambda p: hashlib.sha256(p).digest()), 1,
                             executor=thread_pool_executor(2))

        # synchronous in-process links that hop through the replica's thread pool
        to_rep = PeerLink(SID, "rep", 1)
        to_robot = PeerLink(SID, "robot", 0)
        to_rep.send = lambda f: rep.handle_inbound(f, to_robot)
        to_robot.send = lambda f: robot.handle_inbound(f, to_rep)
        to_rep.mark_up()
        to_robot.mark_up()
        robot.add_link(to_rep)
        env = robot.submit_request(b"hello", SID, 2000)
        assert env.status is Status.OK and env.payload == hashlib.sha256(b"hello").digest()
        rep.executor.shutdown()


class TestReplicaAdapter:
    def test_handler_error_becomes_service_error(self):
        out = []

        def boom(p):
            raise RuntimeError("bad input")

        rep = ReplicaAdapter(LocalService(SID, boom), 3, executor=lambda w, d: _run(w, d))
        back = PeerLink(SID, "robot", 0, send=out.append)
        back.mark_up()
        rep.handle_inbound(encode_request(RequestEnvelope(RequestId(1, 1), SID, 0, b"x")), back)
        kind, body = decode_frame(out[0])
        assert kind is MsgType.RESPONSE
        from ftproxy.envelope import decode_response
        env = decode_response(body)
        assert env.status is Status.SERVICE_ERROR and b"bad input" in env.payload

    def test_misrouted_request_ignored(self):
        rep = ReplicaAdapter(LocalService(SID, bytes), 1, executor=inline)
        back = PeerLink(SID, "robot", 0, send=lambda f: pytest.fail("should not reply"))
        back.mark_up()
        rep.handle_inbound(encode_request(RequestEnvelope(RequestId(1, 1), OTHER, 0, b"x")), back)
        assert rep.misrouted == 1

    def test_reply_to_dead_requester_is_swallowed(self):
        rep = ReplicaAdapter(LocalService(SID, bytes), 1, executor=inline)
        back = PeerLink(SID, "robot", 0, send=lambda f: None)
        back.mark_down()
        rep.handle_inbound(encode_request(RequestEnvelope(RequestId(1, 1), SID, 0, b"x")), back)
        assert rep.served == 1


def _run(work, done):
    try:
        done(Status.OK, work())
    except Exception as exc:
        done(Status.SERVICE_ERROR, repr(exc).encode())


class TestGateway:
    def test_gateway_duplicates_requests_and_relays_responses(self):
        loop = EventLoop()
        robot = RobotProxy(clock=loop.clock, ids=RequestIdGenerator(1), wait=loop.wait)
        gw = Gateway(name="gw")
        up, down = connect(loop, robot, gw, SID, zero, zero, b_endpoint="gw", a_endpoint="robot")
        robot.add_link(up)
        gw.parent = down
        reps = []
        for i, d in enumerate([40.0, 15.0, 25.0], start=1):
            rep = ReplicaAdapter(LocalService(SID, bytes), i, executor=Delayed(loop, d))
            link, back = connect(loop, gw, rep, SID, zero, zero, b_endpoint=f"r{i}", a_endpoint="gw", b_tag=i)
            gw.children.append(link)
            reps.append(rep)
        env = robot.submit_request(b"x", SID, 1000)
        assert env.replica_id == 2 and loop.now == 15.0
        loop.run()
        assert gw.forwarded_down == 3 and gw.relayed_up == 3
        assert robot.duplicates == 2
        assert len(robot.links(SID)) == 1

    def test_no_children_drops(self):
        gw = Gateway()
        gw.gateway_forward(encode_frame(MsgType.REQUEST, b""), Direction.DOWNSTREAM)
        assert gw.dropped == 1

    def test_replica_as_gateway(self):
        loop = EventLoop()
        robot = RobotProxy(clock=loop.clock, ids=RequestIdGenerator(1), wait=loop.wait)
        parent = ReplicaAdapter(LocalService(SID, bytes), 1, executor=Delayed(loop, 100.0))
        child = ReplicaAdapter(LocalService(SID, bytes), 2, executor=Delayed(loop, 10.0))
        l1, b1 = connect(loop, robot, parent, SID, fixed(5.0), fixed(5.0), b_endpoint="p", a_endpoint="robot", b_tag=1)
        l2, b2 = connect(loop, parent, child, SID, fixed(1.0), fixed(1.0), b_endpoint="c", a_endpoint="p", b_tag=2)
        robot.add_link(l1)
        parent.children.append(l2)
        parent.forwarder.parent = b1
        env = robot.submit_request(b"x", SID, 1000)
        assert env.replica_id == 2
        assert loop.now == 5.0 + 1.0 + 10.0 + 1.0 + 5.0


class TestTopology:
    def test_flatten_direct(self):
        root = TopologyNode(NodeKind.ROBOT, children=[
            TopologyNode(NodeKind.REPLICA, "a:1", 1), TopologyNode(NodeKind.REPLICA, "b:1", 2)])
        links = flatten_topology(root, SID)
        assert [(l.endpoint, l.replica_id, l.link_state) for l in links] == [
            ("a:1", 1, LinkState.CONNECTING), ("b:1", 2, LinkState.CONNECTING)]

    def test_flatten_gateway(self):
        gw = TopologyNode(NodeKind.GATEWAY, "gw:1", 100, children=[
            TopologyNode(NodeKind.REPLICA, f"r{i}:1", i) for i in (1, 2, 3)])
        root = TopologyNode(NodeKind.ROBOT, children=[gw])
        assert [l.endpoint for l in flatten_topology(root, SID)] == ["gw:1"]
        assert len(flatten_topology(gw, SID)) == 3

    def test_cycle_rejected(self):
        a = TopologyNode(NodeKind.GATEWAY, "a")
        b = TopologyNode(NodeKind.GATEWAY, "b", children=[a])
        a.children.append(b)
        with pytest.raises(InvalidTopology):
            flatten_topology(TopologyNode(NodeKind.ROBOT, children=[a]), SID)

    def test_gateway_leaf_rejected(self):
        with pytest.raises(InvalidTopology):
            flatten_topology(TopologyNode(NodeKind.ROBOT, children=[TopologyNode(NodeKind.GATEWAY, "g")]), SID)


class TestPeerLink:
    def test_transmit_requires_up(self):
        link = PeerLink(SID, "x", 1, send=lambda f: None)
        with pytest.raises(LinkDown):
            link.transmit(b"")
        link.mark_up(0.0)
        link.transmit(b"")
        assert link.frames_sent == 1

    def test_liveness(self):
        link = PeerLink(SID, "x", 1, send=lambda f: None, heartbeat_interval_ms=100, missed_limit=3)
        link.mark_up(0.0)
        assert link.check_liveness(300.0)
        assert not link.check_liveness(300.1)
        assert link.link_state is LinkState.DOWN


class TestEventLoop:
    def test_fifo_tie_break(self):
        loop = EventLoop()
        out = []
        for i in range(5):
            loop.call_at(1.0, out.append, i)
        loop.run()
        assert out == [0, 1, 2, 3, 4]

    def test_cancel(self):
        loop = EventLoop()
        out = []
        h = loop.call_at(1.0, out.append, 1)
        loop.call_at(2.0, out.append, 2)
        h.cancel()
        loop.run()
        assert out == [2]

    def test_past_rejected(self):
        loop = EventLoop(10.0)
        with pytest.raises(ValueError):
            loop.call_at(5.0, print)

    def test_run_until_time(self):
        loop = EventLoop()
        loop.call_at(5.0, lambda: None)
        loop.run(until=3.0)
        assert loop.now == 3.0 and len(loop) == 1
