"""Latency models, seeded sample streams and the statistics used on them."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

BATCH = 4096


class Purpose(enum.IntEnum):
    """Stream tags; together with (seed, replica_id) they name an RNG stream."""

    SERVICE = 1
    OUTBOUND = 2
    RETURN = 3
    PREEMPTION = 4
    RELAUNCH = 5
    WORKLOAD = 7
    HOP_OUT = 8
    HOP_RETURN = 9


def stream(seed: int, replica_id: int, purpose: Purpose) -> np.random.Generator:
    """Independent generator per (seed, replica, purpose).

    Adding a replica adds new streams without disturbing existing ones.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, replica_id, int(purpose)]))


class LatencyKind(enum.Enum):
    FIXED = "fixed"
    EXPONENTIAL = "exponential"
    LOGNORMAL = "lognormal"
    EMPIRICAL = "empirical"


class Unsupported(ValueError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    kind: LatencyKind
    mean: float = 0.0
    mu: float = 0.0
    sigma: float = 0.0
    samples: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        k = self.kind
        if k is LatencyKind.FIXED and self.mean < 0:
            raise ValueError("fixed latency must be >= 0")
        if k is LatencyKind.EXPONENTIAL and not self.mean > 0:
            raise ValueError("exponential mean must be > 0")
        if k is LatencyKind.LOGNORMAL and not self.sigma > 0:
            raise ValueError("lognormal sigma must be > 0")
        if k is LatencyKind.EMPIRICAL:
            if not self.samples:
                raise ValueError("empirical model needs samples")
            if min(self.samples) < 0:
                raise ValueError("empirical samples must be >= 0")

    @classmethod
    def fixed(cls, value: float) -> "LatencyModel":
        return cls(LatencyKind.FIXED, mean=value)

    @classmethod
    def exponential(cls, mean: float) -> "LatencyModel":
        return cls(LatencyKind.EXPONENTIAL, mean=mean)

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "LatencyModel":
        return cls(LatencyKind.LOGNORMAL, mu=mu, sigma=sigma)

    @classmethod
    def empirical(cls, samples: Sequence[float]) -> "LatencyModel":
        return cls(LatencyKind.EMPIRICAL, samples=tuple(float(s) for s in samples))

    @property
    def expected(self) -> float:
        k = self.kind
        if k is LatencyKind.LOGNORMAL:
            return math.exp(self.mu + self.sigma ** 2 / 2)
        if k is LatencyKind.EMPIRICAL:
            return math.fsum(self.samples) / len(self.samples)
        return self.mean

    def cdf(self, x: float) -> float:
        k = self.kind
        if k is LatencyKind.FIXED:
            return 1.0 if x >= self.mean else 0.0
        if k is LatencyKind.EXPONENTIAL:
            return 0.0 if x <= 0 else -math.expm1(-x / self.mean)
        if k is LatencyKind.LOGNORMAL:
            if x <= 0:
                return 0.0
            return 0.5 * math.erfc(-(math.log(x) - self.mu) / (self.sigma * math.sqrt(2.0)))
        raise Unsupported("empirical models have no closed-form CDF; resample instead")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        k = self.kind
        if k is LatencyKind.FIXED:
            return np.full(n, self.mean)
        if k is LatencyKind.EXPONENTIAL:
            return rng.exponential(self.mean, n)
        if k is LatencyKind.LOGNORMAL:
            return rng.lognormal(self.mu, self.sigma, n)
        return rng.choice(np.asarray(self.samples), n)

    def sampler(self, rng: np.random.Generator) -> Callable[[], float]:
        """Callable returning one sample per call, drawn in fixed-size batches."""
        if self.kind is LatencyKind.FIXED:
            value = float(self.mean)
            return lambda: value
        buf: list[float] = []

        def sample() -> float:
            if not buf:
                buf.extend(reversed(self.draw(rng, BATCH).tolist()))
            return buf.pop()

        return sample

    def to_dict(self) -> dict:
        k = self.kind
        if k is LatencyKind.LOGNORMAL:
            return {"kind": k.value, "mu": self.mu, "sigma": self.sigma}
        if k is LatencyKind.EMPIRICAL:
            return {"kind": k.value, "samples": list(self.samples)}
        return {"kind": k.value, "mean": self.mean}

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "LatencyModel":
        """Accepts ``{kind, mean}``, ``{kind, mu, sigma}``, ``{kind: lognormal, median, sigma}``,
        or ``{kind: empirical, samples | file}``."""
        try:
            kind = LatencyKind(str(d["kind"]).lower())
        except (KeyError, ValueError):
            raise ValueError(f"unknown latency kind in {d!r}") from None
        if kind is LatencyKind.LOGNORMAL:
            sigma = float(d["sigma"])
            if "median" in d:
                return cls.lognormal(math.log(float(d["median"])), sigma)
            return cls.lognormal(float(d["mu"]), sigma)
        if kind is LatencyKind.EMPIRICAL:
            if "samples" in d:
                return cls.empirical(d["samples"])
            path = Path(d["file"])
            if base is not None and not path.is_absolute():
                path = base / path
            values = [float(tok) for tok in path.read_text().split() if tok.strip()]
            return cls.empirical(values)
        return cls(kind, mean=float(d["mean"]))


def percentile(samples: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest sample (1-based)."""
    if len(samples) == 0:
        raise ValueError("percentile of an empty sample")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must be in (0, 1]")
    ordered = sorted(samples)
    # guard against q*n landing a hair above an integer through rounding
    rank = math.ceil(round(q * len(ordered), 9))
    return ordered[max(rank, 1) - 1]


def min_of_n_cdf_oracle(model: LatencyModel, n: int, x: float) -> float:
    """CDF of the fastest of ``n`` independent draws: 1 - (1 - F(x))**n."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    return 1.0 - (1.0 - model.cdf(x)) ** n


def ks_distance(samples: Sequence[float], cdf: Callable[[float], float]) -> float:
    """Two-sided Kolmogorov-Smirnov statistic of ``samples`` against ``cdf``."""
    xs = np.sort(np.asarray(samples, dtype=float))
    n = len(xs)
    if n == 0:
        raise ValueError("empty sample")
    f = np.array([cdf(float(x)) for x in xs])
    upper = np.arange(1, n + 1) / n - f
    lower = f - np.arange(0, n) / n
    return float(max(upper.max(), lower.max()))
