"""Discrete-event execution of a scenario.

The simulated cluster wires real proxy objects (robot, gateways, replica
adapters), the registry, the pool manager and the discovery server together
over in-memory channels driven by one virtual clock. Only service time,
network delay and faults are modelled; everything else is the production code.
"""
from __future__ import annotations

import hashlib
import heapq
import logging
import math
import struct
from dataclasses import dataclass
from typing import Callable, Optional

from ..discovery import DiscoveryClient, DiscoveryServer, DiscoveryUnavailable, EXPIRY_MS, HEARTBEAT_INTERVAL_MS
from ..envelope import (
    MsgType,
    RequestIdGenerator,
    ResponseEnvelope,
    ServiceIdentity,
    Status,
    WireError,
    decode_frame,
    decode_response,
    derive_service_identity,
)
from ..pool import Placement, PoolConfig, PoolEvent, PoolError, PoolManager, ReplicaState
from ..proxy import Gateway, LocalService, PeerLink, ReplicaAdapter, RobotProxy, Unavailable
from ..simnet import EventLoop, connect
from .latency import LatencyModel, Purpose, stream
from .report import RunRecord, RunReport
from .scenario import Scenario, TreeNode

CONTROL = EventLoop.CONTROL

log = logging.getLogger(__name__)

ROBOT = ("robot", 0)
GATEWAY_TAG_BASE = 1 << 32
SCALED_STREAM_BASE = 1 << 20


def service_handler(payload: bytes) -> bytes:
    """Deterministic stand-in for the offloaded algorithm."""
    return hashlib.sha256(payload).digest()


class SimServer:
    """FIFO queue with ``concurrency`` identical servers in front of one replica.

    Service times are known on arrival, so each job's start and finish are
    fixed when it is enqueued (non-preemptive, work conserving).
    """

    def __init__(self, loop: EventLoop, service: Callable[[], float], concurrency: int = 1,
                 trace: Optional[list] = None):
        self.loop = loop
        self.service = service
        self._free = [loop.now] * concurrency
        self.alive = True
        self.trace = trace

    def __call__(self, work: Callable[[], bytes], done: Callable[[Status, bytes], None]) -> None:
        def finish() -> None:
            try:
                result = work()
            except Exception as exc:
                done(Status.SERVICE_ERROR, repr(exc).encode())
            else:
                done(Status.OK, result)

        self.submit(self.service(), finish, "request")

    def submit(self, service_ms: float, on_finish: Callable[[], None], kind: str = "competing") -> float:
        now = self.loop.now
        start = max(now, heapq.heappop(self._free))
        finish = start + service_ms
        heapq.heappush(self._free, finish)
        if self.trace is not None:
            self.trace.append((kind, now, start, finish))
        self.loop.call_at(finish, self._finish, on_finish)
        return finish

    def _finish(self, fn: Callable[[], None]) -> None:
        if self.alive:
            fn()


class ReplicaNode:
    """One incarnation (VM) of a replica at one endpoint."""

    def __init__(self, cluster: "SimCluster", replica_id: int, endpoint: str):
        spec = cluster.spec_of(replica_id)
        self.replica_id = replica_id
        self.endpoint = endpoint
        self.server = SimServer(cluster.loop, cluster.service_sampler(replica_id), spec.concurrency,
                                cluster.queue_traces.setdefault(replica_id, []) if cluster.trace else None)
        self.adapter = ReplicaAdapter(LocalService(cluster.service_id, service_handler), replica_id,
                                      executor=self.server)
        self.alive = True
        self.parent_link: Optional[PeerLink] = None  # the link that the parent holds to us

    def handle_inbound(self, frame: bytes, origin: PeerLink) -> None:
        if self.alive:
            self.adapter.handle_inbound(frame, origin)

    def kill(self) -> None:
        self.alive = False
        self.server.alive = False


class _RobotTap:
    """Records every response frame reaching the robot, then hands it on."""

    def __init__(self, cluster: "SimCluster"):
        self.cluster = cluster

    def handle_inbound(self, frame: bytes, origin: PeerLink) -> None:
        try:
            kind, body = decode_frame(frame)
            if kind is MsgType.RESPONSE:
                env = decode_response(body)
                self.cluster.arrivals.append((str(env.request_id), env.replica_id, self.cluster.loop.now))
        except WireError:
            pass
        self.cluster.robot.handle_inbound(frame, origin)


@dataclass
class _Pending:
    rid: str
    submit: float
    deliver: Optional[float] = None
    winner: Optional[int] = None
    status: Optional[str] = None


class SimCluster:
    def __init__(self, scenario: Scenario, trace: bool = False):
        self.scenario = scenario
        self.trace = trace
        self.loop = EventLoop()
        self.seed = scenario.seed
        self.service_id: ServiceIdentity = derive_service_identity(
            scenario.service_name, scenario.credential, scenario.protocol_version)
        self.discovery = DiscoveryServer(self.loop.clock, EXPIRY_MS if scenario.discovery.heartbeats else None)
        self.dclient = DiscoveryClient.local(self.discovery)

        wl_rng = stream(self.seed, 0, Purpose.WORKLOAD)
        guid = int(wl_rng.integers(0, 2**63)) << 1 | 1
        self._arrival_rng = wl_rng
        self.robot = RobotProxy(clock=self.loop.clock, ids=RequestIdGenerator(guid),
                                wait=self.loop.wait, arm_timer=self._arm_timer)
        self.robot_inbound = _RobotTap(self) if trace else self.robot

        relaunch_rng = stream(self.seed, 0, Purpose.RELAUNCH)
        relaunch = scenario.pool.relaunch_delay.sampler(relaunch_rng)
        placements = [Placement(r.provider, r.region, r.kind, r.hourly_cost) for r in scenario.replicas]
        self.pool = PoolManager(
            self.service_id,
            PoolConfig(len(scenario.replicas), placements, relaunch, scenario.pool.monitor_interval_ms),
            discovery=self.dclient,
        )

        self.nodes: dict[str, ReplicaNode] = {}          # endpoint -> incarnation
        self.current: dict[int, ReplicaNode] = {}        # replica_id -> live incarnation
        self.gateways: dict[str, Gateway] = {}
        self.parent_of: dict = {}                        # child key -> parent key
        self.children_of: dict = {ROBOT: []}
        self.hop_models: dict[str, LatencyModel] = {}
        self._samplers: dict[tuple[int, Purpose], Callable[[], float]] = {}
        self._tick_handle = None
        self.arrivals: list[tuple[str, int, float]] = []
        self.queue_traces: dict[int, list] = {}
        self.events: list[str] = []
        self.notes: list[str] = []
        self.pending: list[_Pending] = []
        self._unresolved = 0
        self._submitted_all = False
        self.default_parent = ROBOT
        self._build()

    # -- models ------------------------------------------------------------
    def spec_of(self, replica_id: int):
        return self.scenario.replicas[self.pool.records[replica_id].slot]

    def _sampler(self, key: int, purpose: Purpose, model: LatencyModel) -> Callable[[], float]:
        fn = self._samplers.get((key, purpose))
        if fn is None:
            fn = model.sampler(stream(self.seed, key, purpose))
            self._samplers[(key, purpose)] = fn
        return fn

    def stream_key(self, rid: int) -> int:
        """Original replicas draw from their scenario stream; scaled-up ones get fresh keys."""
        spec = self.spec_of(rid)
        if rid <= len(self.scenario.replicas) and spec.stream_id:
            return spec.stream_id
        return SCALED_STREAM_BASE + rid

    def service_sampler(self, rid: int) -> Callable[[], float]:
        return self._sampler(self.stream_key(rid), Purpose.SERVICE, self.spec_of(rid).service)

    def _slowdown(self, region: str, now: float) -> float:
        return sum(f.added_ms for f in self.scenario.faults.regional_slowdown
                   if f.region == region and f.start_ms <= now < f.end_ms)

    def _replica_latencies(self, rid: int) -> tuple[Callable[[], float], Callable[[], float]]:
        spec = self.spec_of(rid)
        key = self.stream_key(rid)
        out = self._sampler(key, Purpose.OUTBOUND, spec.network)
        ret = self._sampler(key, Purpose.RETURN, spec.network)
        region = self.pool.records[rid].region
        loop = self.loop
        if not any(f.region == region for f in self.scenario.faults.regional_slowdown):
            return out, ret
        return out, lambda: ret() + self._slowdown(region, loop.now)

    # -- topology ----------------------------------------------------------
    def _build(self) -> None:
        sc = self.scenario
        self.pool.launch(0.0)
        name_to_rid = {}
        for rec in sorted(self.pool.records.values(), key=lambda r: r.replica_id):
            name_to_rid[sc.replicas[rec.slot].name] = rec.replica_id
            node = ReplicaNode(self, rec.replica_id, rec.endpoint)
            self.nodes[rec.endpoint] = node
            self.current[rec.replica_id] = node

        kind = sc.topology.kind
        if kind == "direct":
            for rid in sorted(name_to_rid.values()):
                self._declare(ROBOT, ("replica", rid))
        elif kind == "gateway":
            self._add_gateway("gateway", sc.topology.hop, ROBOT)
            for rid in sorted(name_to_rid.values()):
                self._declare(("gw", "gateway"), ("replica", rid))
            self.default_parent = ("gw", "gateway")
        else:
            def walk(n: TreeNode, parent) -> None:
                if n.gateway is not None:
                    key = self._add_gateway(n.gateway, n.hop, parent)
                else:
                    key = ("replica", name_to_rid[n.replica])
                    self._declare(parent, key)
                for child in n.children:
                    walk(child, key)
            for n in sc.topology.children:
                walk(n, ROBOT)

        self._wire(ROBOT)
        self.pool.listeners.append(self._on_pool_event)
        self.events.extend(ev.line() for ev in self.pool.events)

    def _declare(self, parent, child) -> None:
        self.parent_of[child] = parent
        self.children_of.setdefault(parent, []).append(child)
        self.children_of.setdefault(child, [])

    def _add_gateway(self, name: str, hop: LatencyModel, parent) -> tuple:
        key = ("gw", name)
        if name in self.gateways:
            raise ValueError(f"duplicate gateway {name!r}")
        self.gateways[name] = Gateway(name=name)
        self.hop_models[name] = hop
        self._declare(parent, key)
        return key

    def _inbound(self, key):
        if key == ROBOT:
            return self.robot_inbound
        if key[0] == "gw":
            return self.gateways[key[1]]
        return self.current.get(key[1])

    def _child_list(self, key) -> Optional[list[PeerLink]]:
        if key == ROBOT:
            return None
        if key[0] == "gw":
            return self.gateways[key[1]].children
        node = self.current.get(key[1])
        return node.adapter.children if node is not None else None

    def _add_child_link(self, parent, link: PeerLink) -> None:
        if parent == ROBOT:
            self.robot.add_link(link)
        else:
            lst = self._child_list(parent)
            if lst is not None:
                lst.append(link)

    def _remove_child_link(self, parent, link: PeerLink) -> None:
        if parent == ROBOT:
            self.robot.remove_link(link)
        else:
            lst = self._child_list(parent)
            if lst is not None and link in lst:
                lst.remove(link)

    def _connect(self, parent, child) -> Optional[PeerLink]:
        a = self._inbound(parent)
        b = self._inbound(child)
        if a is None or b is None:
            return None
        if child[0] == "gw":
            idx = sorted(self.gateways).index(child[1])
            model = self.hop_models[child[1]]
            tag = GATEWAY_TAG_BASE + idx
            out = self._sampler(tag, Purpose.HOP_OUT, model)
            ret = self._sampler(tag, Purpose.HOP_RETURN, model)
            endpoint = f"sim://gateway/{child[1]}"
        else:
            tag = child[1]
            out, ret = self._replica_latencies(tag)
            endpoint = b.endpoint
        link_a, link_b = connect(self.loop, a, b, self.service_id, out, ret,
                                 b_endpoint=endpoint, a_endpoint=self._endpoint_of(parent), b_tag=tag)
        self._add_child_link(parent, link_a)
        if child[0] == "gw":
            self.gateways[child[1]].parent = link_b
        else:
            b.parent_link = link_a
            b.adapter.forwarder.parent = link_b
        return link_a

    def _endpoint_of(self, key) -> str:
        if key == ROBOT:
            return "sim://robot"
        if key[0] == "gw":
            return f"sim://gateway/{key[1]}"
        node = self.current.get(key[1])
        return node.endpoint if node else ""

    def _wire(self, key) -> None:
        for child in self.children_of.get(key, []):
            self._connect(key, child)
            self._wire(child)

    # -- pool integration -------------------------------------------------
    def _on_pool_event(self, ev: PoolEvent) -> None:
        self.events.append(ev.line())
        key = ("replica", ev.replica_id)
        if key not in self.parent_of:
            self._declare(self.default_parent, key)
        if ev.kind == "state" and ev.new is ReplicaState.RUNNING:
            node = ReplicaNode(self, ev.replica_id, ev.endpoint)
            self.nodes[ev.endpoint] = node
            self.current[ev.replica_id] = node
            # re-dial our own subtree; children found through discovery
            for child in self.children_of.get(key, []):
                if child[0] == "gw" or child[1] in self.current and self.current[child[1]].alive:
                    self._connect(key, child)
        elif ev.kind == "registered":
            self._refresh_parent(ev.replica_id)
        elif ev.kind == "state" and ev.new in (ReplicaState.TERMINATED, ReplicaState.PREEMPTED):
            self._kill(ev.replica_id)

    def _refresh_parent(self, rid: int) -> None:
        """Pool-change push: the parent re-queries discovery and dials the new endpoint."""
        parent = self.parent_of[("replica", rid)]
        if parent != ROBOT and parent[0] == "replica":
            pnode = self.current.get(parent[1])
            if pnode is None or not pnode.alive:
                return
        try:
            peers = self.dclient.lookup(self.service_id)
        except DiscoveryUnavailable:
            self.notes.append(f"{self.loop.now:.3f} lookup for replica {rid} deferred: discovery down")
            return
        endpoint = next((ep for ep, r in peers if r == rid), None)
        node = self.nodes.get(endpoint) if endpoint else None
        if node is None or not node.alive:
            return
        old = node.parent_link
        if old is not None and old.up:
            return
        self._connect(parent, ("replica", rid))

    def _kill(self, rid: int) -> None:
        node = self.current.get(rid)
        if node is None or not node.alive:
            return
        node.kill()
        link = node.parent_link
        parent = self.parent_of[("replica", rid)]
        if link is None:
            return

        def detect() -> None:
            link.mark_down()
            self._remove_child_link(parent, link)
            self.events.append(f"{self.loop.now:.3f} link to replica={rid} DOWN endpoint={link.endpoint}")
            try:
                self.dclient.report_disconnect(self.service_id, rid)
            except DiscoveryUnavailable:
                pass

        delay = self.scenario.pool.detection_ms
        if delay > 0:
            self.loop.call_later(delay, detect, priority=CONTROL)
        else:
            detect()

    def _ensure_ticking(self) -> None:
        if self._tick_handle is not None:
            return
        interval = self.scenario.pool.monitor_interval_ms
        nxt = math.ceil(self.loop.now / interval) * interval
        if nxt < self.loop.now:
            nxt += interval
        self._tick_handle = self.loop.call_at(nxt, self._tick, priority=CONTROL)

    def _tick(self) -> None:
        self._tick_handle = None
        self.pool.monitor_tick(self.loop.now)
        if not self.pool.steady():
            self._tick_handle = self.loop.call_later(self.scenario.pool.monitor_interval_ms, self._tick, priority=CONTROL)

    # -- faults ------------------------------------------------------------
    def _rid_of(self, name: str) -> int:
        slot = self.scenario.replica_index(name)
        return min(r.replica_id for r in self.pool.records.values() if r.slot == slot)

    def _schedule_faults(self, horizon: float) -> None:
        sc = self.scenario
        for f in sc.faults.preemption:
            rid = self._rid_of(f.replica)
            if f.at_ms is not None:
                self.loop.call_at(f.at_ms, self._preempt, rid, priority=CONTROL)
            else:
                rng = stream(self.seed, self.stream_key(rid), Purpose.PREEMPTION)
                mean = f.mean_interval_ms

                def renew(rid=rid, rng=rng, mean=mean) -> None:
                    self._preempt(rid)
                    nxt = self.loop.now + float(rng.exponential(mean))
                    if nxt <= horizon:
                        self.loop.call_at(nxt, renew, priority=CONTROL)

                first = float(rng.exponential(mean))
                if first <= horizon:
                    self.loop.call_at(first, renew, priority=CONTROL)
        for f in sc.faults.contention:
            rid = self._rid_of(f.replica)
            end = min(f.end_ms, horizon)

            def compete(rid=rid, f=f, end=end) -> None:
                node = self.current.get(rid)
                if node is not None and node.alive:
                    node.server.submit(f.service_ms, lambda: None)
                nxt = self.loop.now + f.period_ms
                if nxt < end:
                    self.loop.call_at(nxt, compete)

            if f.start_ms < end:
                self.loop.call_at(f.start_ms, compete)
        for o in sc.discovery.outages:
            self.loop.call_at(o.start_ms, self._discovery_down, priority=CONTROL)
            if math.isfinite(o.end_ms):
                self.loop.call_at(o.end_ms, self._discovery_up, priority=CONTROL)
        for s in sc.scale:
            self.loop.call_at(s.at_ms, self._scale, s.direction, s.count, priority=CONTROL)
        if sc.discovery.heartbeats:
            self.loop.call_at(HEARTBEAT_INTERVAL_MS, self._heartbeats, horizon)

    def _preempt(self, rid: int) -> None:
        if self.pool.preempt(rid, self.loop.now) is not None:
            self._ensure_ticking()

    def _discovery_down(self) -> None:
        self.discovery.kill()
        self.events.append(f"{self.loop.now:.3f} discovery DOWN")

    def _discovery_up(self) -> None:
        keep = self.scenario.discovery.keep_state_on_restart
        self.discovery.restart(keep_state=keep)
        self.events.append(f"{self.loop.now:.3f} discovery UP")
        if not keep:
            self.pool.resync_registrations()
            self._ensure_ticking()

    def _scale(self, direction: str, count: int) -> None:
        try:
            desired = self.pool.scale(direction, count, self.loop.now)
        except PoolError as exc:
            self.notes.append(f"{self.loop.now:.3f} scale {direction} {count} refused: {exc}")
            return
        self.events.append(f"{self.loop.now:.3f} scale {direction} {count} desired={desired}")
        self._ensure_ticking()

    def _heartbeats(self, horizon: float) -> None:
        for rec in self.pool.running():
            if rec.registered:
                try:
                    self.dclient.heartbeat(self.service_id, rec.endpoint, rec.replica_id)
                except DiscoveryUnavailable:
                    pass
        if self.discovery.alive:
            self.discovery.expire(self.loop.now)
        if self.loop.now + HEARTBEAT_INTERVAL_MS <= horizon:
            self.loop.call_later(HEARTBEAT_INTERVAL_MS, self._heartbeats, horizon)

    # -- workload ------------------------------------------------------------
    def _arm_timer(self, deadline: float) -> None:
        self.loop.call_at(deadline, self.robot.registry.expire, deadline)

    def _payload(self, seq: int) -> bytes:
        n = self.scenario.workload.payload_bytes
        head = struct.pack("!QQ", self.seed, seq)
        return (head * (n // len(head) + 1))[:n]

    def _submit(self, seq: int) -> None:
        wl = self.scenario.workload
        now = self.loop.now
        entry = _Pending("", now)
        self.pending.append(entry)
        self._unresolved += 1

        def on_done(env: ResponseEnvelope) -> None:
            entry.deliver = self.loop.now
            if env.status is Status.TIMEOUT_SYNTHETIC:
                entry.status = "TIMEOUT"
            else:
                entry.status = env.status.name
                entry.winner = env.replica_id
            self._unresolved -= 1

        try:
            rid = self.robot.send_request(self._payload(seq), self.service_id, wl.timeout_ms, on_done)
            entry.rid = str(rid)
        except Unavailable:
            entry.rid = f"{self.robot.ids.client_guid:016x}-unavailable-{seq}"
            entry.deliver = now
            entry.status = "UNAVAILABLE"
            self._unresolved -= 1
        if seq + 1 < wl.requests:
            gap = wl.interarrival_ms
            if wl.arrival == "exponential":
                gap = float(self._arrival_rng.exponential(wl.interarrival_ms))
            self.loop.call_later(gap, self._submit, seq + 1)
        else:
            self._submitted_all = True

    def run(self) -> RunReport:
        wl = self.scenario.workload
        if wl.arrival == "fixed":
            horizon = (wl.requests - 1) * wl.interarrival_ms + wl.timeout_ms
        else:
            horizon = wl.requests * wl.interarrival_ms * 4 + wl.timeout_ms
        self._schedule_faults(horizon)
        self.loop.call_at(0.0, self._submit, 0)
        self.loop.run_until(lambda: self._submitted_all and self._unresolved == 0)
        end = self.loop.now
        report = RunReport(self.scenario.name, self.seed)
        report.records = [RunRecord(p.rid, p.submit, p.deliver, p.winner, p.status) for p in self.pending]
        report.cost_usd = self.pool.accrue_cost(end)
        report.events = list(self.events)
        report.notes = list(self.notes)
        return report


def run_scenario(scenario: Scenario) -> RunReport:
    return SimCluster(scenario).run()
