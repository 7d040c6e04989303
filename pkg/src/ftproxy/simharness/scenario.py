"""Scenario files: schema, parsing and validation.

Scenarios are YAML (or JSON) documents with ``schema_version: 1``. See
``docs/SCENARIO_SCHEMA.md`` for every key. Validation collects all problems
before raising, so one run reports every offending field.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from ..pool import ReplicaKind
from .latency import LatencyModel

SCHEMA_VERSION = 1
SEED_ENV = "FTPROXY_SEED"
INF = float("inf")


class ScenarioError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid scenario:\n  " + "\n  ".join(errors))
        self.errors = errors


@dataclass(frozen=True)
class ReplicaSpec:
    name: str
    provider: str
    region: str
    kind: ReplicaKind
    hourly_cost: float
    service: LatencyModel
    network: LatencyModel
    concurrency: int = 1
    # RNG stream key; stays fixed when the scenario is restricted to a subset
    stream_id: int = 0


@dataclass(frozen=True)
class SlowdownFault:
    region: str
    added_ms: float
    start_ms: float = 0.0
    end_ms: float = INF


@dataclass(frozen=True)
class ContentionFault:
    replica: str
    period_ms: float
    service_ms: float
    start_ms: float = 0.0
    end_ms: float = INF


@dataclass(frozen=True)
class PreemptionFault:
    replica: str
    at_ms: Optional[float] = None
    mean_interval_ms: Optional[float] = None


@dataclass(frozen=True)
class FaultSpec:
    regional_slowdown: tuple[SlowdownFault, ...] = ()
    contention: tuple[ContentionFault, ...] = ()
    preemption: tuple[PreemptionFault, ...] = ()


@dataclass(frozen=True)
class Workload:
    requests: int
    interarrival_ms: float
    timeout_ms: float
    arrival: str = "fixed"
    payload_bytes: int = 64


@dataclass(frozen=True)
class TreeNode:
    """Topology entry: a gateway (with ``hop`` latency) or a replica by name."""

    replica: Optional[str] = None
    gateway: Optional[str] = None
    hop: LatencyModel = LatencyModel.fixed(0.0)
    children: tuple["TreeNode", ...] = ()


@dataclass(frozen=True)
class Topology:
    kind: str = "direct"  # direct | gateway | tree
    hop: LatencyModel = LatencyModel.fixed(0.0)
    children: tuple[TreeNode, ...] = ()


@dataclass(frozen=True)
class PoolSpec:
    monitor_interval_ms: float = 1000.0
    relaunch_delay: LatencyModel = LatencyModel.fixed(20 * 60 * 1000.0)
    detection_ms: float = 0.0


@dataclass(frozen=True)
class Outage:
    start_ms: float
    end_ms: float


@dataclass(frozen=True)
class DiscoverySpec:
    outages: tuple[Outage, ...] = ()
    heartbeats: bool = False
    keep_state_on_restart: bool = False


@dataclass(frozen=True)
class ScaleEvent:
    at_ms: float
    direction: str
    count: int


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    workload: Workload
    replicas: tuple[ReplicaSpec, ...]
    topology: Topology = Topology()
    faults: FaultSpec = FaultSpec()
    pool: PoolSpec = PoolSpec()
    discovery: DiscoverySpec = DiscoverySpec()
    scale: tuple[ScaleEvent, ...] = ()
    service_name: str = "service"
    protocol_version: int = 1
    credential: bytes = bytes(32)

    def replica_index(self, name: str) -> int:
        for i, r in enumerate(self.replicas):
            if r.name == name:
                return i
        raise KeyError(name)

    def with_replicas(self, names: list[str]) -> "Scenario":
        """Same scenario restricted to ``names`` (faults on dropped replicas removed).

        Only direct topologies can be restricted.
        """
        keep = [r for r in self.replicas if r.name in names]
        faults = FaultSpec(
            self.faults.regional_slowdown,
            tuple(c for c in self.faults.contention if c.replica in names),
            tuple(p for p in self.faults.preemption if p.replica in names),
        )
        return replace(self, replicas=tuple(keep), faults=faults, topology=Topology("direct"))


# -- parsing ----------------------------------------------------------------

class _Collector:
    def __init__(self):
        self.errors: list[str] = []

    def error(self, where: str, msg: str) -> None:
        self.errors.append(f"{where}: {msg}")

    def number(self, d: dict, key: str, where: str, default: Any = None, *, minimum: float | None = None,
               positive: bool = False, integer: bool = False) -> Any:
        if key not in d:
            if default is None:
                self.error(f"{where}.{key}", "required")
            return default
        v = d[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            if isinstance(v, str) and v.strip().lower() in ("inf", "infinity"):
                v = INF
            else:
                self.error(f"{where}.{key}", f"expected a number, got {v!r}")
                return default
        if integer and (v != int(v)):
            self.error(f"{where}.{key}", f"expected an integer, got {v!r}")
            return default
        if positive and not v > 0:
            self.error(f"{where}.{key}", f"must be > 0, got {v!r}")
        if minimum is not None and v < minimum:
            self.error(f"{where}.{key}", f"must be >= {minimum}, got {v!r}")
        return int(v) if integer else float(v)

    def latency(self, d: Any, where: str, base: Path | None) -> LatencyModel | None:
        if not isinstance(d, dict):
            self.error(where, "expected a latency model mapping")
            return None
        try:
            return LatencyModel.from_dict(d, base)
        except (KeyError, ValueError, TypeError, OSError) as exc:
            self.error(where, f"bad latency model: {exc}")
            return None

    def mapping(self, d: dict, key: str, where: str) -> dict:
        v = d.get(key, {}) or {}
        if not isinstance(v, dict):
            self.error(f"{where}.{key}", "expected a mapping")
            return {}
        return v

    def listing(self, d: dict, key: str, where: str) -> list:
        v = d.get(key, []) or []
        if not isinstance(v, list):
            self.error(f"{where}.{key}", "expected a list")
            return []
        return v


def load_scenario(path: str | os.PathLike, seed_override: int | None = None) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError([f"{path}: cannot read ({exc.strerror})"]) from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ScenarioError([f"{path}: not parseable: {exc}"]) from exc
    return parse_scenario(data, base=path.parent, seed_override=seed_override)


def env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw, 0)
    except ValueError:
        raise ScenarioError([f"{SEED_ENV}: expected an integer, got {raw!r}"]) from None


def parse_scenario(data: Any, base: Path | None = None, seed_override: int | None = None) -> Scenario:
    c = _Collector()
    if not isinstance(data, dict):
        raise ScenarioError(["scenario: top level must be a mapping"])
    data = copy.deepcopy(data)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        c.error("schema_version", f"unsupported value {version!r} (expected {SCHEMA_VERSION})")

    name = str(data.get("name", "scenario"))
    seed = c.number(data, "seed", "scenario", 0, integer=True, minimum=0)
    if seed_override is not None:
        seed = seed_override

    svc = c.mapping(data, "service", "scenario")
    service_name = str(svc.get("name", "service")) or "service"
    protocol_version = c.number(svc, "protocol_version", "service", 1, integer=True, minimum=0)
    credential = bytes(32)
    if "credential" in svc:
        try:
            credential = bytes.fromhex(str(svc["credential"]))
            if len(credential) != 32:
                c.error("service.credential", "must be 64 hex digits")
        except ValueError:
            c.error("service.credential", "must be hex")

    wl = c.mapping(data, "workload", "scenario")
    workload = Workload(
        requests=c.number(wl, "requests", "workload", None, integer=True, minimum=1),
        interarrival_ms=c.number(wl, "interarrival_ms", "workload", 1000.0, minimum=0),
        timeout_ms=c.number(wl, "timeout_ms", "workload", 10_000.0, positive=True),
        arrival=str(wl.get("arrival", "fixed")),
        payload_bytes=c.number(wl, "payload_bytes", "workload", 64, integer=True, minimum=16),
    )
    if workload.arrival not in ("fixed", "exponential"):
        c.error("workload.arrival", f"must be fixed or exponential, got {workload.arrival!r}")

    replicas = []
    names = set()
    raw_replicas = c.listing(data, "replicas", "scenario")
    if not raw_replicas:
        c.error("replicas", "at least one replica is required")
    for i, r in enumerate(raw_replicas):
        where = f"replicas[{i}]"
        if not isinstance(r, dict):
            c.error(where, "expected a mapping")
            continue
        rname = str(r.get("name", f"r{i + 1}"))
        if rname in names:
            c.error(f"{where}.name", f"duplicate replica name {rname!r}")
        names.add(rname)
        try:
            kind = ReplicaKind(str(r.get("kind", "spot")).lower().replace("-", "_"))
        except ValueError:
            c.error(f"{where}.kind", f"must be spot or on_demand, got {r.get('kind')!r}")
            kind = ReplicaKind.SPOT
        service = c.latency(r.get("service"), f"{where}.service", base)
        network = c.latency(r.get("network", {"kind": "fixed", "mean": 0}), f"{where}.network", base)
        replicas.append(ReplicaSpec(
            name=rname,
            provider=str(r.get("provider", "aws")),
            region=str(r.get("region", f"region-{i + 1}")),
            kind=kind,
            hourly_cost=c.number(r, "hourly_cost", where, 0.0, minimum=0),
            service=service or LatencyModel.fixed(1.0),
            network=network or LatencyModel.fixed(0.0),
            concurrency=c.number(r, "concurrency", where, 1, integer=True, minimum=1),
            stream_id=i + 1,
        ))

    topology = _parse_topology(c, data.get("topology", "direct"), names, base)

    fl = c.mapping(data, "faults", "scenario")
    slow = []
    for i, f in enumerate(c.listing(fl, "regional_slowdown", "faults")):
        where = f"faults.regional_slowdown[{i}]"
        if not isinstance(f, dict) or "region" not in f:
            c.error(where, "needs a region")
            continue
        s = SlowdownFault(str(f["region"]), c.number(f, "added_ms", where, 0.0, minimum=0),
                          c.number(f, "start_ms", where, 0.0, minimum=0), c.number(f, "end_ms", where, INF))
        if not s.start_ms < s.end_ms:
            c.error(where, "start_ms must be before end_ms")
        slow.append(s)
    cont = []
    for i, f in enumerate(c.listing(fl, "contention", "faults")):
        where = f"faults.contention[{i}]"
        if not isinstance(f, dict) or f.get("replica") not in names:
            c.error(where, f"unknown replica {f.get('replica') if isinstance(f, dict) else f!r}")
            continue
        cf = ContentionFault(str(f["replica"]), c.number(f, "period_ms", where, 1.0, positive=True),
                             c.number(f, "service_ms", where, 0.0, minimum=0),
                             c.number(f, "start_ms", where, 0.0, minimum=0), c.number(f, "end_ms", where, INF))
        if not cf.start_ms < cf.end_ms:
            c.error(where, "start_ms must be before end_ms")
        cont.append(cf)
    pre = []
    for i, f in enumerate(c.listing(fl, "preemption", "faults")):
        where = f"faults.preemption[{i}]"
        if not isinstance(f, dict) or f.get("replica") not in names:
            c.error(where, f"unknown replica {f.get('replica') if isinstance(f, dict) else f!r}")
            continue
        if ("at_ms" in f) == ("mean_interval_ms" in f):
            c.error(where, "give exactly one of at_ms or mean_interval_ms")
            continue
        if "at_ms" in f:
            pre.append(PreemptionFault(str(f["replica"]), at_ms=c.number(f, "at_ms", where, 0.0, minimum=0)))
        else:
            pre.append(PreemptionFault(str(f["replica"]),
                                       mean_interval_ms=c.number(f, "mean_interval_ms", where, 1.0, positive=True)))
    faults = FaultSpec(tuple(slow), tuple(cont), tuple(pre))

    pl = c.mapping(data, "pool", "scenario")
    relaunch = LatencyModel.fixed(20 * 60 * 1000.0)
    if "relaunch_delay" in pl:
        relaunch = c.latency(pl["relaunch_delay"], "pool.relaunch_delay", base) or relaunch
    elif "relaunch_delay_ms" in pl:
        relaunch = LatencyModel.fixed(c.number(pl, "relaunch_delay_ms", "pool", 0.0, minimum=0))
    pool = PoolSpec(
        monitor_interval_ms=c.number(pl, "monitor_interval_ms", "pool", 1000.0, positive=True),
        relaunch_delay=relaunch,
        detection_ms=c.number(pl, "detection_ms", "pool", 0.0, minimum=0),
    )

    dl = c.mapping(data, "discovery", "scenario")
    outages = []
    for i, o in enumerate(c.listing(dl, "outages", "discovery")):
        where = f"discovery.outages[{i}]"
        if not isinstance(o, dict):
            c.error(where, "expected a mapping")
            continue
        out = Outage(c.number(o, "start_ms", where, 0.0, minimum=0), c.number(o, "end_ms", where, INF))
        if not out.start_ms < out.end_ms:
            c.error(where, "start_ms must be before end_ms")
        outages.append(out)
    discovery = DiscoverySpec(tuple(outages), bool(dl.get("heartbeats", False)),
                              bool(dl.get("keep_state_on_restart", False)))

    scale = []
    for i, s in enumerate(c.listing(data, "scale", "scenario")):
        where = f"scale[{i}]"
        if not isinstance(s, dict):
            c.error(where, "expected a mapping")
            continue
        direction = str(s.get("direction", "")).lower()
        if direction not in ("up", "down"):
            c.error(f"{where}.direction", "must be up or down")
        scale.append(ScaleEvent(c.number(s, "at_ms", where, 0.0, minimum=0), direction,
                                c.number(s, "count", where, 1, integer=True, minimum=1)))

    if c.errors:
        raise ScenarioError(c.errors)
    return Scenario(
        name=name, seed=seed, workload=workload, replicas=tuple(replicas), topology=topology,
        faults=faults, pool=pool, discovery=discovery, scale=tuple(scale),
        service_name=service_name, protocol_version=protocol_version, credential=credential,
    )


def _parse_topology(c: _Collector, raw: Any, names: set[str], base: Path | None) -> Topology:
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict):
        c.error("topology", "expected direct, gateway or a mapping")
        return Topology()
    kind = str(raw.get("kind", "direct"))
    hop = LatencyModel.fixed(0.0)
    if "hop" in raw:
        hop = c.latency(raw["hop"], "topology.hop", base) or hop
    if kind in ("direct", "gateway"):
        return Topology(kind, hop)
    if kind != "tree":
        c.error("topology.kind", f"must be direct, gateway or tree, got {kind!r}")
        return Topology()
    seen: list[str] = []

    def node(d: Any, where: str) -> TreeNode | None:
        if not isinstance(d, dict) or (("replica" in d) == ("gateway" in d)):
            c.error(where, "each node needs exactly one of replica or gateway")
            return None
        kids = [node(k, f"{where}.children[{j}]") for j, k in enumerate(d.get("children", []) or [])]
        kids = tuple(k for k in kids if k is not None)
        if "gateway" in d:
            if not kids:
                c.error(where, "a gateway needs at least one child")
            h = c.latency(d["hop"], f"{where}.hop", base) if "hop" in d else None
            return TreeNode(gateway=str(d["gateway"]), hop=h or LatencyModel.fixed(0.0), children=kids)
        rname = str(d["replica"])
        if rname not in names:
            c.error(where, f"unknown replica {rname!r}")
        seen.append(rname)
        return TreeNode(replica=rname, children=kids)

    children = tuple(n for n in (node(d, f"topology.children[{i}]")
                                 for i, d in enumerate(raw.get("children", []) or [])) if n is not None)
    if not children:
        c.error("topology.children", "a tree needs at least one child")
    dupes = {n for n in seen if seen.count(n) > 1}
    if dupes:
        c.error("topology", f"replicas placed more than once: {sorted(dupes)}")
    missing = names - set(seen)
    if missing:
        c.error("topology", f"replicas missing from the tree: {sorted(missing)}")
    return Topology("tree", hop, children)
