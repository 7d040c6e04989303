import pytest
from hypothesis import given, strategies as st

from ftproxy.discovery import DiscoveryClient, DiscoveryServer
from ftproxy.envelope import derive_service_identity
from ftproxy.pool import (
    MS_PER_HOUR,
    Placement,
    PoolConfig,
    PoolError,
    PoolManager,
    ReplicaKind,
    ReplicaState,
)

SID = derive_service_identity("svc", bytes(32), 1)
SPOT = [Placement("aws", "us-west-1", ReplicaKind.SPOT, 0.17), Placement("aws", "us-west-2", ReplicaKind.SPOT, 0.17)]


def make(delay=1000.0, interval=100.0, placements=SPOT, desired=2):
    srv = DiscoveryServer(lambda: 0.0, None)
    pool = PoolManager(SID, PoolConfig(desired, placements, delay, interval), DiscoveryClient.local(srv))
    pool.launch(0.0)
    return pool, srv


def run_ticks(pool, start, end, interval):
    t = start
    while t <= end:
        pool.monitor_tick(t)
        t += interval


def test_launch_registers_distinct_regions():
    pool, srv = make()
    assert [r.state for r in pool.records.values()] == [ReplicaState.RUNNING] * 2
    assert sorted(r.region for r in pool.records.values()) == ["us-west-1", "us-west-2"]
    assert len(srv.lookup(SID)) == 2


def test_preempt_relaunch_new_endpoint_same_identity():
    pool, srv = make(delay=1000.0, interval=100.0)
    old = pool.records[1].endpoint
    pool.preempt(1, 250.0)
    assert pool.records[1].state is ReplicaState.PREEMPTED
    run_ticks(pool, 300.0, 1300.0, 100.0)
    rec = pool.records[1]
    assert rec.state is ReplicaState.RUNNING and rec.endpoint != old and rec.generation == 1
    assert rec.service_id == SID
    assert (rec.endpoint, 1) in srv.lookup(SID)
    down, up = pool.downtime(1)[0]
    assert down == 250.0 and up == 1300.0


@given(st.floats(0, 5000), st.floats(1, 5000), st.floats(1, 500))
def test_downtime_within_one_interval_of_delay(preempt_at, delay, interval):
    pool, _ = make(delay=delay, interval=interval)
    pool.preempt(1, preempt_at)
    k = 0
    while pool.records[1].state is not ReplicaState.RUNNING:
        k += 1
        t = k * interval
        if t >= preempt_at:
            pool.monitor_tick(t)
    (down, up), = pool.downtime(1)
    assert delay <= up - down < delay + interval


def test_on_demand_not_preempted():
    pool, _ = make(placements=[Placement("aws", "r", ReplicaKind.ON_DEMAND, 0.4)], desired=1)
    assert pool.preempt(1, 10.0) is None


def test_registration_pending_while_discovery_down():
    pool, srv = make(delay=0.0)
    pool.preempt(1, 0.0)
    srv.kill()
    pool.monitor_tick(100.0)
    assert pool.records[1].state is ReplicaState.RUNNING and not pool.records[1].registered
    assert not pool.steady()
    srv.restart(keep_state=True)
    events = pool.monitor_tick(200.0)
    assert [e.kind for e in events] == ["registered"]
    assert pool.steady()


def test_scale_up_down_round_trip():
    pool, _ = make()
    pool.scale("up", 2, 0.0)
    assert pool.desired == 4
    assert sum(r.state is ReplicaState.PROVISIONING for r in pool.records.values()) == 2
    run_ticks(pool, 0.0, 1000.0, 100.0)
    assert len(pool.running()) == 4
    pool.scale("down", 2, 2000.0)
    assert pool.desired == 2 and len(pool.live()) == 2


def test_scale_down_floor():
    pool, _ = make()
    with pytest.raises(PoolError):
        pool.scale("down", 2)
    with pytest.raises(PoolError):
        pool.scale("up", 0)


def test_scale_down_victim_most_expensive_then_youngest():
    placements = [Placement("aws", "a", ReplicaKind.SPOT, 0.2), Placement("gcp", "b", ReplicaKind.SPOT, 0.5),
                  Placement("aws", "c", ReplicaKind.SPOT, 0.2)]
    pool, _ = make(placements=placements, desired=3)
    pool.scale("down", 1, 10.0)
    assert pool.records[2].state is ReplicaState.TERMINATED
    pool.scale("down", 1, 20.0)
    assert pool.records[3].state is ReplicaState.TERMINATED


def test_cost_accrues_over_running_time_only():
    pool, _ = make(delay=MS_PER_HOUR, interval=1000.0)
    pool.preempt(1, MS_PER_HOUR)
    pool.monitor_tick(MS_PER_HOUR)
    pool.monitor_tick(2 * MS_PER_HOUR)
    # replica 1 billed 2 of 3 hours, replica 2 all 3
    assert pool.accrue_cost(3 * MS_PER_HOUR) == pytest.approx(0.17 * 5)


def test_state_round_trip():
    pool, _ = make()
    pool.scale("up", 1, 5.0)
    again = PoolManager.from_dict(pool.to_dict(), pool.config)
    assert again.to_dict() == pool.to_dict()


def test_terminate_lowers_desired():
    pool, srv = make()
    pool.terminate(2, 0.0)
    assert pool.desired == 1 and srv.lookup(SID) == [(pool.records[1].endpoint, 1)]
