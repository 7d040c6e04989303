"""Run reports and their on-disk form."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .latency import percentile

CSV_HEADER = ("request_id", "submit_ms", "deliver_ms", "latency_ms", "winner", "status")
SUMMARY_HEADER = ("mean_ms", "p50_ms", "p99_ms", "success_rate", "cost_usd",
                  "submitted", "delivered", "timed_out", "unavailable")

DELIVERED = ("OK", "SERVICE_ERROR")


@dataclass(frozen=True)
class RunRecord:
    request_id: str
    submit_ms: float
    deliver_ms: float
    winner: Optional[int]
    status: str  # OK | SERVICE_ERROR | TIMEOUT | UNAVAILABLE

    @property
    def latency_ms(self) -> float:
        return self.deliver_ms - self.submit_ms

    def row(self) -> list[str]:
        return [self.request_id, _fmt(self.submit_ms), _fmt(self.deliver_ms), _fmt(self.latency_ms),
                "" if self.winner is None else str(self.winner), self.status]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


@dataclass
class RunReport:
    name: str
    seed: int
    records: list[RunRecord] = field(default_factory=list)
    cost_usd: float = 0.0
    events: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def submitted(self) -> int:
        return len(self.records)

    def count(self, status: str) -> int:
        return sum(1 for r in self.records if r.status == status)

    @property
    def delivered(self) -> int:
        return sum(1 for r in self.records if r.status in DELIVERED)

    @property
    def timed_out(self) -> int:
        return self.count("TIMEOUT")

    @property
    def unavailable(self) -> int:
        return self.count("UNAVAILABLE")

    @property
    def success_rate(self) -> float:
        return self.delivered / self.submitted if self.records else math.nan

    def latencies(self) -> list[float]:
        return [r.latency_ms for r in self.records if r.status in DELIVERED]

    @property
    def mean(self) -> float:
        lat = self.latencies()
        return math.fsum(lat) / len(lat) if lat else math.nan

    @property
    def p50(self) -> float:
        lat = self.latencies()
        return percentile(lat, 0.5) if lat else math.nan

    @property
    def p99(self) -> float:
        lat = self.latencies()
        return percentile(lat, 0.99) if lat else math.nan

    def summary_row(self) -> list[str]:
        return [_fmt(self.mean), _fmt(self.p50), _fmt(self.p99), _fmt(self.success_rate), _fmt(self.cost_usd),
                str(self.submitted), str(self.delivered), str(self.timed_out), str(self.unavailable)]

    def summary_line(self) -> str:
        return (f"{self.name}: mean={self.mean:.3f}ms p50={self.p50:.3f}ms p99={self.p99:.3f}ms "
                f"success_rate={self.success_rate:.4f} cost=${self.cost_usd:.4f} "
                f"submitted={self.submitted} delivered={self.delivered} "
                f"timed_out={self.timed_out} unavailable={self.unavailable}")

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()


def cdf_rows(latencies: Sequence[float]) -> list[tuple[float, float]]:
    xs = sorted(latencies)
    n = len(xs)
    return [(x, (i + 1) / n) for i, x in enumerate(xs)]


def histogram_rows(latencies: Sequence[float], bins: int = 30) -> list[tuple[float, float, int]]:
    if not latencies:
        return []
    lo, hi = min(latencies), max(latencies)
    width = (hi - lo) / bins if hi > lo else 1.0
    counts = [0] * bins
    for x in latencies:
        counts[min(int((x - lo) / width), bins - 1)] += 1
    return [(lo + i * width, lo + (i + 1) * width, counts[i]) for i in range(bins)]


class ReportError(OSError):
    pass


def emit_report(report: RunReport, path: str | os.PathLike, *, distribution: bool = True) -> Path:
    """Write ``requests.csv``, ``summary.csv`` and ``events.log`` into directory ``path``.

    With ``distribution`` also ``cdf.csv`` and ``histogram.csv`` (the data
    behind histogram+CDF latency plots). Returns the directory.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "requests.csv").write_text(report.csv_text())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerow(report.summary_row())
        (out / "summary.csv").write_text(buf.getvalue())
        (out / "events.log").write_text("".join(line + "\n" for line in report.events))
        if distribution:
            lat = report.latencies()
            (out / "cdf.csv").write_text(
                "latency_ms,cdf\n" + "".join(f"{_fmt(x)},{p:.6f}\n" for x, p in cdf_rows(lat)))
            (out / "histogram.csv").write_text(
                "bin_lo_ms,bin_hi_ms,count\n" + "".join(f"{_fmt(a)},{_fmt(b)},{n}\n" for a, b, n in histogram_rows(lat)))
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc.strerror or exc}") from exc
    return out


def read_records(path: str | os.PathLike) -> list[RunRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [RunRecord(row["request_id"], float(row["submit_ms"]), float(row["deliver_ms"]),
                          int(row["winner"]) if row["winner"] else None, row["status"]) for row in reader]
