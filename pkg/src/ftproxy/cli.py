"""``ftproxy`` command line: launch, scale, size, simulate, report.

Every subcommand accepts ``--format csv`` for machine-readable output with a
stable column order. ``FTPROXY_SEED`` overrides scenario seeds.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import yaml

from .discovery import DiscoveryClient, DiscoveryServer, DiscoveryTcpServer, tcp_call
from .envelope import derive_service_identity
from .pool import Placement, PoolConfig, PoolError, PoolManager, ReplicaKind
from .proxy import Gateway, LocalService, ReplicaAdapter, RobotProxy
from .simharness import LatencyModel, ScenarioError, emit_report, load_scenario, read_records, run_scenario
from .simharness.report import SUMMARY_HEADER, ReportError, cdf_rows, histogram_rows
from .simharness.runner import SimCluster, service_handler
from .simharness.scenario import (
    ReplicaSpec,
    Scenario,
    Topology,
    Workload,
    env_seed,
)
from .sizing import VmFailureParams, cost_compare, required_replicas, system_failure_probability, vm_failure_probability

log = logging.getLogger("ftproxy")

DEFAULT_STATE = ".ftproxy-state.json"
ALIASES = {"slowdown": "regional-slowdown", "planner": "stochastic-planner", "preemption": "preemption-timeline"}
DEFAULT_CLUSTER = {
    "services": [{
        "name": "service",
        "replicas": [
            {"provider": "aws", "region": "us-west-1", "kind": "spot", "hourly_cost": 0.17},
            {"provider": "aws", "region": "us-west-2", "kind": "spot", "hourly_cost": 0.17},
        ],
    }],
    "topology": "direct",
}


class UsageError(Exception):
    pass


# -- output helpers -----------------------------------------------------------

def table(rows: Sequence[Sequence[Any]], header: Sequence[str], fmt: str) -> str:
    rows = [[str(c) for c in r] for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


POOL_HEADER = ("replica", "provider", "region", "kind", "state", "endpoint", "hourly_cost")


def pool_rows(pool: PoolManager) -> list[list[Any]]:
    return [[r.replica_id, r.provider, r.region, r.kind.value, r.state.value, r.endpoint, f"{r.hourly_cost:.2f}"]
            for r in sorted(pool.records.values(), key=lambda r: r.replica_id)]


# -- cluster specs ------------------------------------------------------------

def load_cluster(path: str | None) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CLUSTER))
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"{path}: cannot read ({exc.strerror})") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: not parseable: {exc}") from exc
    errors = []
    if not isinstance(data, dict):
        raise UsageError("cluster spec: top level must be a mapping")
    services = data.get("services")
    if not isinstance(services, list) or not services:
        errors.append("services: at least one service is required")
        services = []
    for i, svc in enumerate(services):
        if not isinstance(svc, dict) or not svc.get("name"):
            errors.append(f"services[{i}].name: required")
            continue
        reps = svc.get("replicas")
        if reps is None:
            svc["replicas"] = DEFAULT_CLUSTER["services"][0]["replicas"]
        elif not isinstance(reps, list) or not reps:
            errors.append(f"services[{i}].replicas: replica count must be >= 1")
        else:
            for j, r in enumerate(reps):
                if not isinstance(r, dict) or "region" not in r:
                    errors.append(f"services[{i}].replicas[{j}]: needs a region")
                elif str(r.get("kind", "spot")).replace("-", "_") not in ("spot", "on_demand"):
                    errors.append(f"services[{i}].replicas[{j}].kind: must be spot or on_demand")
    if data.get("topology", "direct") not in ("direct", "gateway"):
        errors.append("topology: must be direct or gateway")
    if errors:
        raise UsageError("invalid cluster spec:\n  " + "\n  ".join(errors))
    data.setdefault("topology", "direct")
    return data


def service_scenario(svc: dict, topology: str) -> Scenario:
    replicas = []
    for j, r in enumerate(svc["replicas"]):
        replicas.append(ReplicaSpec(
            name=f"r{j + 1}",
            provider=str(r.get("provider", "aws")),
            region=str(r["region"]),
            kind=ReplicaKind(str(r.get("kind", "spot")).replace("-", "_")),
            hourly_cost=float(r.get("hourly_cost", 0.0)),
            service=LatencyModel.from_dict(r.get("service", {"kind": "fixed", "mean": 1.0})),
            network=LatencyModel.from_dict(r.get("network", {"kind": "fixed", "mean": 0.0})),
            stream_id=j + 1,
        ))
    return Scenario(name=svc["name"], seed=0, workload=Workload(1, 0.0, 1000.0), replicas=tuple(replicas),
                    topology=Topology(topology), service_name=svc["name"])


def pool_config(svc: dict) -> PoolConfig:
    sc = service_scenario(svc, "direct")
    return PoolConfig(len(sc.replicas), [Placement(r.provider, r.region, r.kind, r.hourly_cost) for r in sc.replicas])


def save_state(path: str, spec: dict, pools: dict[str, PoolManager]) -> None:
    state = {"spec": spec, "pools": {name: p.to_dict() for name, p in pools.items()}}
    Path(path).write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def load_state(path: str) -> tuple[dict, dict[str, PoolManager]]:
    try:
        state = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"{path}: no cluster state ({exc.strerror}); run `ftproxy launch` first") from exc
    spec = state["spec"]
    pools = {}
    for svc in spec["services"]:
        pools[svc["name"]] = PoolManager.from_dict(state["pools"][svc["name"]], pool_config(svc))
    return spec, pools


# -- launch -------------------------------------------------------------------

def cmd_launch(args) -> int:
    spec = load_cluster(args.config)
    if args.wall:
        return _launch_wall(spec, args)
    pools = {}
    out = []
    for svc in spec["services"]:
        cluster = SimCluster(service_scenario(svc, spec["topology"]))
        pools[svc["name"]] = cluster.pool
        links = cluster.robot.links(cluster.service_id)
        rows = []
        for rec in sorted(cluster.pool.records.values(), key=lambda r: r.replica_id):
            node = cluster.current[rec.replica_id]
            state = node.parent_link.link_state.value.upper() if node.parent_link else "NONE"
            via = "robot" if spec["topology"] == "direct" else "gateway"
            rows.append([svc["name"], rec.replica_id, rec.region, rec.kind.value, rec.state.value, rec.endpoint, via, state])
        out.append(table(rows, ("service", "replica", "region", "kind", "state", "endpoint", "via", "link"), args.format))
        if args.format == "text":
            out.append(f"{svc['name']}: service_id={cluster.service_id.hex[:16]} robot_links={len(links)} "
                       f"up={len(cluster.robot.up_links(cluster.service_id))}\n")
    save_state(args.state, spec, pools)
    sys.stdout.write("".join(out))
    return 0


def _launch_wall(spec: dict, args) -> int:
    directory = DiscoveryServer()
    dserver = DiscoveryTcpServer(directory, port=args.discovery_port).start()
    client = DiscoveryClient(tcp_call(*dserver.address))
    from .transport import FrameServer, HeartbeatPump, dial
    servers, pumps, rows = [], [], []
    pools = {}
    try:
        for svc in spec["services"]:
            sid = derive_service_identity(svc["name"], bytes(32), 1)
            robot = RobotProxy()
            gateway = None
            pool = PoolManager(sid, pool_config(svc), discovery=client,
                               endpoint_factory=lambda rec: f"pending-{rec.replica_id}")
            for rec_i in range(len(svc["replicas"])):
                adapter = ReplicaAdapter(LocalService(sid, service_handler), rec_i + 1)
                servers.append(FrameServer(adapter, sid).start())
            eps = iter(servers[-len(svc["replicas"]):])
            pool.endpoint_factory = lambda rec: next(eps).endpoint
            pool.launch(0.0)
            pools[svc["name"]] = pool
            if spec["topology"] == "gateway":
                gateway = Gateway(name=f"{svc['name']}-gateway")
                gsrv = FrameServer(gateway, sid).start()
                servers.append(gsrv)
                robot.add_link(dial(robot, sid, gsrv.endpoint).link)
            for endpoint, rid in client.lookup(sid):
                link = dial(gateway or robot, sid, endpoint, rid).link
                if gateway:
                    gateway.children.append(link)
                else:
                    robot.add_link(link)
                pumps.append(HeartbeatPump([link]).start())
                rows.append([svc["name"], rid, endpoint, link.link_state.value.upper(),
                             "gateway" if gateway else "robot"])
            probe = robot.submit_request(b"readiness-probe!", sid, 2000)
            rows.append([svc["name"], "probe", f"winner={probe.replica_id}", probe.status.name, ""])
        sys.stdout.write(table(rows, ("service", "replica", "endpoint", "link", "via"), args.format))
        save_state(args.state, spec, pools)
        if args.hold > 0:
            time.sleep(args.hold)
    finally:
        for p in pumps:
            p.stop()
        for s in servers:
            s.stop()
        dserver.stop()
    return 0


# -- scale --------------------------------------------------------------------

def cmd_scale(args) -> int:
    spec, pools = load_state(args.state)
    name = args.service or spec["services"][0]["name"]
    if name not in pools:
        raise UsageError(f"unknown service {name!r}")
    pool = pools[name]
    try:
        pool.scale(args.direction, args.count)
    except PoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    save_state(args.state, spec, pools)
    sys.stdout.write(table(pool_rows(pool), POOL_HEADER, args.format))
    if args.format == "text":
        print(f"desired={pool.desired} live={len(pool.live())}")
    return 0


# -- size ---------------------------------------------------------------------

def cmd_size(args) -> int:
    out = []
    if args.uptime is not None or args.recovery is not None:
        if args.uptime is None or args.recovery is None:
            raise UsageError("--uptime and --recovery go together")
        try:
            p_vm = vm_failure_probability(VmFailureParams(args.uptime, args.recovery))
            n = required_replicas(p_vm, args.target)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        p_sys = system_failure_probability([p_vm] * n)
        out.append(table([[f"{p_vm:.6g}", n, f"{p_sys:.6g}", f"{args.target:.6g}"]],
                         ("p_vm", "replicas", "p_system", "target"), args.format))
    if args.price:
        if len(args.price) < 2:
            raise UsageError("--price needs the single-server price followed by one price per replica")
        try:
            plans = cost_compare(args.price[0], args.price[1:])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        out.append(table([[p.name, f"{p.hourly_total:.2f}", f"{p.ratio:.2f}x"] for p in plans],
                         ("plan", "hourly_usd", "ratio"), args.format))
    if not out:
        raise UsageError("nothing to size: give --uptime/--recovery and/or --price")
    sys.stdout.write("\n".join(out) if args.format == "text" else "".join(out))
    return 0


# -- simulate -----------------------------------------------------------------

def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("ftproxy.scenarios").iterdir() if p.name.endswith(".yaml"))


def resolve_scenario(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    stem = ALIASES.get(p.stem, p.stem)
    candidate = resources.files("ftproxy.scenarios") / f"{stem}.yaml"
    if candidate.is_file():
        return Path(str(candidate))
    raise UsageError(f"no scenario file {name!r} and no bundled scenario of that name "
                     f"(bundled: {', '.join(bundled_scenarios())})")


def cmd_simulate(args) -> int:
    seed = args.seed if args.seed is not None else env_seed()
    scenario = load_scenario(resolve_scenario(args.scenario), seed_override=seed)
    report = run_scenario(scenario)
    if args.out:
        emit_report(report, args.out)
    runs = [report]
    if args.compare:
        if scenario.topology.kind != "direct":
            raise UsageError("--compare needs a direct topology")
        for r in scenario.replicas:
            base = replace(scenario.with_replicas([r.name]), name=f"{scenario.name}[single:{r.name}]")
            single = run_scenario(base)
            runs.append(single)
            if args.out:
                emit_report(single, Path(args.out) / f"single-{r.name}", distribution=False)
    if args.format == "csv":
        rows = [[r.name, r.seed, *r.summary_row()] for r in runs]

        sys.stdout.write(table(rows, ("scenario", "seed", *SUMMARY_HEADER), "csv"))
    else:
        for r in runs:
            print(r.summary_line())
    return 0


# -- report -------------------------------------------------------------------

def cmd_report(args) -> int:
    out = Path(args.dir)
    if args.view == "summary":
        try:
            sys.stdout.write((out / "summary.csv").read_text())
        except OSError as exc:
            raise UsageError(f"{out / 'summary.csv'}: {exc.strerror}") from exc
        return 0
    if args.view == "timeline":
        try:
            sys.stdout.write((out / "events.log").read_text())
        except OSError as exc:
            raise UsageError(f"{out / 'events.log'}: {exc.strerror}") from exc
        return 0
    try:
        records = read_records(out / "requests.csv")
    except OSError as exc:
        raise UsageError(f"{out / 'requests.csv'}: {exc.strerror}") from exc
    lat = [r.latency_ms for r in records if r.status in ("OK", "SERVICE_ERROR")]
    if args.view == "cdf":
        sys.stdout.write(table([[f"{x:.3f}", f"{p:.4f}"] for x, p in cdf_rows(lat)], ("latency_ms", "cdf"), args.format))
        return 0
    rows = histogram_rows(lat, args.bins)
    if args.format == "csv":
        sys.stdout.write(table([[f"{a:.3f}", f"{b:.3f}", n] for a, b, n in rows], ("bin_lo_ms", "bin_hi_ms", "count"), "csv"))
        return 0
    peak = max((n for _, _, n in rows), default=0) or 1
    for a, b, n in rows:
        print(f"{a:10.2f} - {b:10.2f} | {'#' * round(40 * n / peak):<40} {n}")
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ftproxy", description="Fault-tolerant request replication for robot services.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--format", choices=("text", "csv"), default="text")
        return p

    p = common(sub.add_parser("launch", help="bring up a cluster (simulated by default)"))
    p.add_argument("config", nargs="?", help="cluster spec YAML; default is two spot replicas in two regions")
    p.add_argument("--state", default=DEFAULT_STATE, help="cluster state file (default %(default)s)")
    p.add_argument("--wall", action="store_true", help="run real TCP proxies and discovery on localhost")
    p.add_argument("--discovery-port", type=int, default=0)
    p.add_argument("--hold", type=float, default=0.0, help="seconds to keep a --wall cluster running")
    p.set_defaults(func=cmd_launch)

    p = common(sub.add_parser("scale", help="change the number of replicas"))
    p.add_argument("direction", choices=("up", "down"))
    p.add_argument("count", type=int, nargs="?", default=1)
    p.add_argument("--service")
    p.add_argument("--state", default=DEFAULT_STATE)
    p.set_defaults(func=cmd_scale)

    p = common(sub.add_parser("size", help="replica count and cost comparison"))
    p.add_argument("--uptime", type=float, help="mean time between preemptions (any unit)")
    p.add_argument("--recovery", type=float, help="mean time to recover (same unit)")
    p.add_argument("--target", type=float, default=5e-4, help="acceptable system failure probability")
    p.add_argument("--price", type=float, action="append",
                   help="hourly price; first is the single server, the rest are replicas")
    p.set_defaults(func=cmd_size)

    p = common(sub.add_parser("simulate", help="run a scenario in virtual time"))
    p.add_argument("scenario", help="scenario file or bundled name")
    p.add_argument("--out", help="directory for requests.csv, summary.csv, events.log, cdf.csv, histogram.csv")
    p.add_argument("--seed", type=int, help="override the scenario seed (also FTPROXY_SEED)")
    p.add_argument("--compare", action="store_true", help="also run each replica alone as a baseline")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("report", help="render a simulation output directory"))
    p.add_argument("dir")
    p.add_argument("--view", choices=("summary", "timeline", "histogram", "cdf"), default="summary")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScenarioError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
