"""Replica pool manager: keeps the desired number of replicas alive.

Preemptions are reported from outside (``preempt``); the manager notices them
on its next ``monitor_tick``, relaunches the replica in the same slot under a
new endpoint and re-registers it with discovery. All times are milliseconds.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence, Union

from .envelope import ServiceIdentity

log = logging.getLogger(__name__)

MS_PER_HOUR = 3_600_000.0
DEFAULT_RELAUNCH_DELAY_MS = 20 * 60 * 1000.0
DEFAULT_MONITOR_INTERVAL_MS = 1000.0


class ReplicaKind(enum.Enum):
    SPOT = "spot"
    ON_DEMAND = "on_demand"


class ReplicaState(enum.Enum):
    PROVISIONING = "PROVISIONING"
    RUNNING = "RUNNING"
    PREEMPTED = "PREEMPTED"
    RELAUNCHING = "RELAUNCHING"
    TERMINATED = "TERMINATED"


BILLED = (ReplicaState.RUNNING, ReplicaState.PROVISIONING)


class Direction(enum.Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class Placement:
    provider: str
    region: str
    kind: ReplicaKind
    hourly_cost: float


DelayModel = Union[float, Callable[[], float]]


@dataclass
class PoolConfig:
    desired_replicas: int
    placements: Sequence[Placement]
    relaunch_delay: DelayModel = DEFAULT_RELAUNCH_DELAY_MS
    monitor_interval: float = DEFAULT_MONITOR_INTERVAL_MS

    def __post_init__(self):
        if self.desired_replicas < 1:
            raise ValueError("desired_replicas must be >= 1")
        if not self.placements:
            raise ValueError("at least one placement is required")
        if self.monitor_interval <= 0:
            raise ValueError("monitor_interval must be positive")

    def sample_delay(self) -> float:
        d = self.relaunch_delay() if callable(self.relaunch_delay) else float(self.relaunch_delay)
        if d < 0:
            raise ValueError("relaunch delay must be non-negative")
        return d


@dataclass
class ReplicaRecord:
    replica_id: int
    service_id: ServiceIdentity
    provider: str
    region: str
    kind: ReplicaKind
    state: ReplicaState
    endpoint: str
    hourly_cost: float
    state_since: float
    slot: int = 0
    generation: int = 0
    launched_at: float = 0.0
    preempted_at: Optional[float] = None
    ready_at: Optional[float] = None
    registered: bool = False
    billed_ms: float = 0.0

    def cost_until(self, now: float) -> float:
        billed = self.billed_ms
        if self.state in BILLED:
            billed += max(0.0, now - self.state_since)
        return self.hourly_cost * billed / MS_PER_HOUR


@dataclass(frozen=True)
class PoolEvent:
    time: float
    replica_id: int
    old: Optional[ReplicaState]
    new: Optional[ReplicaState]
    endpoint: str
    kind: str = "state"  # or "registered" / "deregistered"

    def line(self) -> str:
        if self.kind == "state":
            old = self.old.value if self.old else "NEW"
            return f"{self.time:.3f} replica={self.replica_id} {old}->{self.new.value} endpoint={self.endpoint}"
        return f"{self.time:.3f} replica={self.replica_id} {self.kind} endpoint={self.endpoint}"


class PoolError(ValueError):
    pass


def default_endpoint(record: ReplicaRecord) -> str:
    return f"sim://{record.provider}/{record.region}/r{record.replica_id}-g{record.generation}"


class PoolManager:
    """Single-writer control loop over the replicas of one service.

    ``discovery`` is any object with ``register(service_id, endpoint, replica_id)``
    and ``report_disconnect(service_id, replica_id)``; a ``ConnectionError``
    from it leaves the registration pending until a later tick.
    Listeners receive every emitted :class:`PoolEvent`.
    """

    def __init__(
        self,
        service_id: ServiceIdentity,
        config: PoolConfig,
        discovery=None,
        endpoint_factory: Callable[[ReplicaRecord], str] = default_endpoint,
    ):
        self.service_id = service_id
        self.config = config
        self.discovery = discovery
        self.endpoint_factory = endpoint_factory
        self.desired = config.desired_replicas
        self.records: dict[int, ReplicaRecord] = {}
        self.events: list[PoolEvent] = []
        self.listeners: list[Callable[[PoolEvent], None]] = []
        self._next_id = 1
        self._next_slot = 0

    # -- helpers ---------------------------------------------------------
    def _emit(self, event: PoolEvent) -> PoolEvent:
        self.events.append(event)
        log.info(event.line())
        for fn in self.listeners:
            fn(event)
        return event

    def _transition(self, rec: ReplicaRecord, new: ReplicaState, now: float) -> PoolEvent:
        if rec.state in BILLED:
            rec.billed_ms += max(0.0, now - rec.state_since)
        old, rec.state, rec.state_since = rec.state, new, now
        return self._emit(PoolEvent(now, rec.replica_id, old, new, rec.endpoint))

    def _new_record(self, now: float, state: ReplicaState) -> ReplicaRecord:
        slot = self._next_slot % len(self.config.placements)
        self._next_slot += 1
        pl = self.config.placements[slot]
        rec = ReplicaRecord(
            replica_id=self._next_id, service_id=self.service_id, provider=pl.provider, region=pl.region,
            kind=pl.kind, state=state, endpoint="", hourly_cost=pl.hourly_cost, state_since=now,
            slot=slot, launched_at=now,
        )
        self._next_id += 1
        rec.endpoint = self.endpoint_factory(rec)
        self.records[rec.replica_id] = rec
        self._emit(PoolEvent(now, rec.replica_id, None, state, rec.endpoint))
        return rec

    def _register(self, rec: ReplicaRecord, now: float, events: list[PoolEvent]) -> None:
        if self.discovery is None:
            rec.registered = True
            return
        try:
            self.discovery.register(self.service_id, rec.endpoint, rec.replica_id)
        except ConnectionError as exc:
            log.info("replica %d registration pending: %s", rec.replica_id, exc)
            return
        rec.registered = True
        events.append(self._emit(PoolEvent(now, rec.replica_id, rec.state, rec.state, rec.endpoint, "registered")))

    def _deregister(self, rec: ReplicaRecord, now: float) -> None:
        rec.registered = False
        if self.discovery is None:
            return
        try:
            self.discovery.report_disconnect(self.service_id, rec.replica_id)
        except ConnectionError as exc:
            log.info("replica %d disconnect report lost: %s", rec.replica_id, exc)

    # -- queries ---------------------------------------------------------
    def live(self) -> list[ReplicaRecord]:
        return [r for r in self.records.values() if r.state is not ReplicaState.TERMINATED]

    def running(self) -> list[ReplicaRecord]:
        return [r for r in self.records.values() if r.state is ReplicaState.RUNNING]

    def steady(self) -> bool:
        """Nothing left for the monitor to do until something external happens."""
        live = self.live()
        return len(live) == self.desired and all(
            r.state is ReplicaState.RUNNING and r.registered for r in live
        )

    # -- operations ------------------------------------------------------
    def launch(self, now: float) -> list[PoolEvent]:
        """Bring up the initial replicas, already RUNNING and registered."""
        events: list[PoolEvent] = []
        while len(self.live()) < self.desired:
            rec = self._new_record(now, ReplicaState.RUNNING)
            events.append(self.events[-1])
            self._register(rec, now, events)
        return events

    def preempt(self, replica_id: int, now: float) -> Optional[PoolEvent]:
        """Provider interruption of a spot replica; ignored for others."""
        rec = self.records.get(replica_id)
        if rec is None or rec.kind is not ReplicaKind.SPOT or rec.state is not ReplicaState.RUNNING:
            return None
        rec.preempted_at = now
        rec.registered = False
        return self._transition(rec, ReplicaState.PREEMPTED, now)

    def terminate(self, replica_id: int, now: float) -> Optional[PoolEvent]:
        """Manual shutdown; the replica is not replaced unless the pool scales up."""
        rec = self.records.get(replica_id)
        if rec is None or rec.state is ReplicaState.TERMINATED:
            return None
        self._deregister(rec, now)
        ev = self._transition(rec, ReplicaState.TERMINATED, now)
        self.desired = max(1, self.desired - 1)
        return ev

    def monitor_tick(self, now: float) -> list[PoolEvent]:
        events: list[PoolEvent] = []
        for rec in sorted(self.records.values(), key=lambda r: r.replica_id):
            if rec.state is ReplicaState.PREEMPTED:
                events.append(self._transition(rec, ReplicaState.RELAUNCHING, now))
                # the replacement is requested as soon as the interruption lands
                rec.ready_at = (rec.preempted_at if rec.preempted_at is not None else now) + self.config.sample_delay()
            if rec.state in (ReplicaState.RELAUNCHING, ReplicaState.PROVISIONING) and rec.ready_at is not None \
                    and rec.ready_at <= now:
                if rec.state is ReplicaState.RELAUNCHING:
                    rec.generation += 1
                    rec.endpoint = self.endpoint_factory(rec)
                rec.ready_at = None
                events.append(self._transition(rec, ReplicaState.RUNNING, now))
            if rec.state is ReplicaState.RUNNING and not rec.registered:
                self._register(rec, now, events)
        return events

    def scale(self, direction: Direction | str, count: int, now: float = 0.0) -> int:
        direction = Direction(direction)
        if count < 1:
            raise PoolError("count must be a positive integer")
        if direction is Direction.UP:
            self.desired += count
            for _ in range(count):
                rec = self._new_record(now, ReplicaState.PROVISIONING)
                rec.ready_at = now + self.config.sample_delay()
            return self.desired
        if self.desired - count < 1:
            raise PoolError(f"cannot scale down by {count}: at least one replica must remain")
        self.desired -= count
        # most expensive first, then youngest
        victims = sorted(self.live(), key=lambda r: (-r.hourly_cost, -r.launched_at, -r.replica_id))
        for rec in victims[:count]:
            self._deregister(rec, now)
            self._transition(rec, ReplicaState.TERMINATED, now)
        return self.desired

    def resync_registrations(self) -> None:
        """Forget registrations, e.g. after the discovery server lost its state."""
        for rec in self.live():
            rec.registered = False

    def accrue_cost(self, now: float) -> float:
        return sum(rec.cost_until(now) for rec in self.records.values())

    def downtime(self, replica_id: int) -> list[tuple[float, float]]:
        """(down_at, running_again_at) intervals from the event log."""
        out, down = [], None
        for ev in self.events:
            if ev.replica_id != replica_id or ev.kind != "state":
                continue
            if ev.new is ReplicaState.PREEMPTED:
                down = ev.time
            elif ev.new is ReplicaState.RUNNING and down is not None:
                out.append((down, ev.time))
                down = None
        return out

    # -- persistence (CLI state file) ------------------------------------
    def to_dict(self) -> dict:
        recs = []
        for r in self.records.values():
            d = asdict(r)
            d["service_id"] = r.service_id.hex
            d["kind"] = r.kind.value
            d["state"] = r.state.value
            recs.append(d)
        return {
            "service_id": self.service_id.hex,
            "desired": self.desired,
            "next_id": self._next_id,
            "next_slot": self._next_slot,
            "records": recs,
        }

    @classmethod
    def from_dict(cls, data: dict, config: PoolConfig, discovery=None,
                  endpoint_factory: Callable[[ReplicaRecord], str] = default_endpoint) -> "PoolManager":
        sid = ServiceIdentity(bytes.fromhex(data["service_id"]))
        pool = cls(sid, config, discovery, endpoint_factory)
        pool.desired = data["desired"]
        pool._next_id = data["next_id"]
        pool._next_slot = data["next_slot"]
        for d in data["records"]:
            d = dict(d)
            d["service_id"] = sid
            d["kind"] = ReplicaKind(d["kind"])
            d["state"] = ReplicaState(d["state"])
            rec = ReplicaRecord(**d)
            pool.records[rec.replica_id] = rec
        return pool
