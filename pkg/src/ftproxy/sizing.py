"""Replica sizing from per-VM failure odds, and hourly cost comparison."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

TIE_REL_TOL = 1e-12


@dataclass(frozen=True)
class VmFailureParams:
    mean_uptime: float
    mean_recovery: float

    def __post_init__(self):
        if not (self.mean_uptime > 0 and self.mean_recovery > 0):
            raise ValueError("mean_uptime and mean_recovery must both be positive")
        if not (math.isfinite(self.mean_uptime) and math.isfinite(self.mean_recovery)):
            raise ValueError("mean_uptime and mean_recovery must be finite")


@dataclass(frozen=True)
class SizingResult:
    p_vm: float
    p_system: float
    n_required: int


def vm_failure_probability(params: VmFailureParams) -> float:
    """Fraction of time a VM is down: recovery / (uptime + recovery)."""
    return params.mean_recovery / (params.mean_uptime + params.mean_recovery)


def system_failure_probability(per_vm: Sequence[float]) -> float:
    """All replicas down at once, assuming independent failures."""
    if len(per_vm) == 0:
        raise ValueError("at least one replica is required")
    for p in per_vm:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability out of range: {p}")
    return math.prod(per_vm)


def _meets(p_n: float, target: float) -> bool:
    return p_n <= target or math.isclose(p_n, target, rel_tol=TIE_REL_TOL, abs_tol=0.0)


def required_replicas(p_vm: float, p_target: float) -> int:
    """Smallest N with ``p_vm ** N <= p_target``.

    Near-ties (within 1e-12 relative) count as meeting the target. The log
    ratio gives a starting guess; repeated multiplication settles the answer.
    """
    if not 0.0 < p_target < 1.0:
        raise ValueError("p_target must be in (0, 1)")
    if p_vm >= 1.0:
        raise ValueError("p_vm >= 1 can never meet a target below 1")
    if p_vm < 0.0:
        raise ValueError("p_vm must be a probability")
    if p_vm == 0.0 or _meets(p_vm, p_target):
        return 1
    n = max(1, math.ceil(math.log(p_target) / math.log(p_vm)))
    while n > 1 and _meets(p_vm ** (n - 1), p_target):
        n -= 1
    while not _meets(p_vm ** n, p_target):
        n += 1
    return n


def size(params: VmFailureParams, p_target: float) -> SizingResult:
    p_vm = vm_failure_probability(params)
    n = required_replicas(p_vm, p_target)
    return SizingResult(p_vm, system_failure_probability([p_vm] * n), n)


@dataclass(frozen=True)
class PlanCost:
    name: str
    hourly_total: float
    ratio: float  # hourly_total / cheapest plan's hourly_total


def compare_plans(plans: Mapping[str, Sequence[float]]) -> list[PlanCost]:
    """Hourly total of each plan and its cost relative to the cheapest one."""
    if not plans:
        raise ValueError("no plans to compare")
    totals = {}
    for name, prices in plans.items():
        if not prices or any(not p > 0 for p in prices):
            raise ValueError(f"plan {name!r} needs positive prices")
        totals[name] = math.fsum(prices)
    cheapest = min(totals.values())
    return [PlanCost(name, total, total / cheapest) for name, total in totals.items()]


def cost_compare(single_hourly: float, replica_hourlies: Sequence[float]) -> list[PlanCost]:
    """Single on-demand server against a replicated deployment."""
    return compare_plans({"single": [single_hourly], "replicated": list(replica_hourlies)})
