"""Per-vehicle outcome aggregation and one-tailed Welch t-tests."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import betainc


@dataclass(frozen=True)
class Trip:
    """One vehicle's record. ``exit_s`` is None for a vehicle still in the
    network when the run ended; its times are then censored at that moment."""

    vehicle_id: int
    movement: str
    spawn_s: float
    exit_s: float | None
    travel_time_s: float
    stopped_delay_s: float

    @classmethod
    def finished(cls, vehicle_id, movement, spawn_s, exit_s, stopped_delay_s) -> "Trip":
        return cls(vehicle_id, movement, spawn_s, exit_s, exit_s - spawn_s, stopped_delay_s)

    @property
    def completed(self) -> bool:
        return self.exit_s is not None


TRIP_FIELDS = ("vehicle_id", "movement", "spawn_s", "exit_s", "travel_time_s", "stopped_delay_s")


def trips_to_csv(trips: Iterable[Trip]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIP_FIELDS)
    for t in trips:
        w.writerow([
            t.vehicle_id, t.movement, f"{t.spawn_s:.3f}",
            "" if t.exit_s is None else f"{t.exit_s:.3f}",
            f"{t.travel_time_s:.3f}", f"{t.stopped_delay_s:.3f}",
        ])
    return buf.getvalue()


def trips_from_csv(text: str) -> list[Trip]:
    rows = csv.DictReader(io.StringIO(text))
    return [
        Trip(int(r["vehicle_id"]), r["movement"], float(r["spawn_s"]),
             float(r["exit_s"]) if r["exit_s"].strip() else None,
             float(r["travel_time_s"]), float(r["stopped_delay_s"]))
        for r in rows
    ]


@dataclass
class RunMetrics:
    per_vehicle: list[tuple[float, float]]  # (delay_s, travel_time_s)
    mean_delay_s: float | None
    total_delay_s: float
    max_delay_s: float | None
    mean_travel_s: float | None
    max_travel_s: float | None
    solver_name: str = ""
    fingerprint: str = ""
    unfinished: int = 0  # records censored at the end of the run

    @property
    def empty(self) -> bool:
        return not self.per_vehicle

    @property
    def count(self) -> int:
        return len(self.per_vehicle)

    def to_dict(self) -> dict:
        return {
            "solver": self.solver_name,
            "fingerprint": self.fingerprint,
            "count": self.count,
            "empty": self.empty,
            "mean_delay_s": self.mean_delay_s,
            "total_delay_s": self.total_delay_s,
            "max_delay_s": self.max_delay_s,
            "mean_travel_s": self.mean_travel_s,
            "max_travel_s": self.max_travel_s,
            "unfinished": self.unfinished,
            "per_vehicle": [list(pv) for pv in self.per_vehicle],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunMetrics":
        return cls(
            per_vehicle=[tuple(pv) for pv in data["per_vehicle"]],
            mean_delay_s=data["mean_delay_s"],
            total_delay_s=data["total_delay_s"],
            max_delay_s=data["max_delay_s"],
            mean_travel_s=data["mean_travel_s"],
            max_travel_s=data["max_travel_s"],
            solver_name=data.get("solver", ""),
            fingerprint=data.get("fingerprint", ""),
            unfinished=data.get("unfinished", 0),
        )


def summarize(trips: Iterable[Trip], solver_name: str = "", fingerprint: str = "") -> RunMetrics:
    """Aggregate trips. Sums use math.fsum so the result is order independent."""
    trips = list(trips)
    pv = [(t.stopped_delay_s, t.travel_time_s) for t in trips]
    if not pv:
        return RunMetrics([], None, 0.0, None, None, None, solver_name, fingerprint)
    delays = [a for a, _ in pv]
    travel = [b for _, b in pv]
    total = math.fsum(delays)
    return RunMetrics(
        per_vehicle=pv,
        mean_delay_s=total / len(pv),
        total_delay_s=total,
        max_delay_s=max(delays),
        mean_travel_s=math.fsum(travel) / len(pv),
        max_travel_s=max(travel),
        solver_name=solver_name,
        fingerprint=fingerprint,
        unfinished=sum(not t.completed for t in trips),
    )


# -- Welch ----------------------------------------------------------------------

class DegenerateSample(ValueError):
    pass


@dataclass(frozen=True)
class TTestReport:
    t_statistic: float
    welch_dof: float
    p_value: float
    n_a: int
    n_b: int
    mean_a: float
    mean_b: float
    var_a: float
    var_b: float


def student_t_cdf(t: float, dof: float) -> float:
    """P(T <= t) through the regularized incomplete beta function."""
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    x = dof / (dof + t * t)
    tail = 0.5 * float(betainc(dof / 2.0, 0.5, x))
    return tail if t < 0 else 1.0 - tail


def _moments(sample) -> tuple[int, float, float]:
    a = np.asarray(sample, dtype=float)
    if a.size < 2:
        raise DegenerateSample("each sample needs at least two observations")
    mean = math.fsum(a) / a.size
    var = math.fsum((a - mean) ** 2) / (a.size - 1)
    return int(a.size), mean, var


def welch_one_tailed(a, b) -> TTestReport:
    """Welch test of H_a: mean(a) < mean(b); the p-value is the lower t tail."""
    n_a, m_a, v_a = _moments(a)
    n_b, m_b, v_b = _moments(b)
    se2_a, se2_b = v_a / n_a, v_b / n_b
    se2 = se2_a + se2_b
    if se2 == 0.0:
        if m_a == m_b:
            raise DegenerateSample("both samples are constant and equal")
        t = -math.inf if m_a < m_b else math.inf
        return TTestReport(t, float(n_a + n_b - 2), 0.0 if t < 0 else 1.0,
                           n_a, n_b, m_a, m_b, v_a, v_b)
    t = (m_a - m_b) / math.sqrt(se2)
    dof = se2 ** 2 / (se2_a ** 2 / (n_a - 1) + se2_b ** 2 / (n_b - 1))
    return TTestReport(t, dof, student_t_cdf(t, dof), n_a, n_b, m_a, m_b, v_a, v_b)


# -- comparison tables -------------------------------------------------------------

METRICS = ("delay", "travel_time")


@dataclass(frozen=True)
class TableRow:
    metric: str
    volume: float
    zone_m: float
    baseline: str
    t: float
    dof: float
    p: float
    n_ref: int
    n_baseline: int
    unit: str


@dataclass
class ComparisonReport:
    reference: str
    unit: str
    rows: list[TableRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "volume", "zone", "reference", "baseline", "t", "dof", "p",
                    "n_reference", "n_baseline", "unit"])
        for r in self.rows:
            w.writerow([r.metric, r.volume, r.zone_m, self.reference, r.baseline,
                        f"{r.t:.6g}", f"{r.dof:.6g}", f"{r.p:.6g}", r.n_ref, r.n_baseline, r.unit])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        volumes = sorted({r.volume for r in self.rows})
        for metric in METRICS:
            sub = [r for r in self.rows if r.metric == metric]
            if not sub:
                continue
            lines.append(f"one-tailed Welch p-values, {metric} "
                         f"(H_a: mean {self.reference} < mean baseline; unit: {self.unit})")
            lines.append("baseline  zone_m  " + "  ".join(f"vol={v:<9g}" for v in volumes))
            keyed = {(r.baseline, r.zone_m, r.volume): r.p for r in sub}
            for base in sorted({r.baseline for r in sub}):
                for zone in sorted({r.zone_m for r in sub}):
                    cells = [keyed.get((base, zone, v)) for v in volumes]
                    lines.append(f"{base:<8}  {zone:<6g}  " + "  ".join(
                        f"{c:<13.3e}" if c is not None else f"{'-':<13}" for c in cells))
            lines.append("")
        return "\n".join(lines)


def experiment_table(
    samples: Mapping[tuple[float, float, str], Mapping[str, Sequence[float]]],
    reference: str = "sa",
    baselines: Sequence[str] | None = None,
    unit: str = "per-vehicle pooled",
) -> ComparisonReport:
    """Welch p-values of `reference` against every baseline per (volume, zone).

    `samples` maps (volume, zone_m, solver) to {"delay": [...], "travel_time": [...]}.
    """
    conditions = sorted({(v, z) for v, z, _ in samples})
    if baselines is None:
        baselines = sorted({s for _, _, s in samples if s != reference})
    missing = [
        (v, z, s) for v, z in conditions for s in (reference, *baselines)
        if (v, z, s) not in samples
    ]
    if missing:
        raise KeyError(f"missing conditions: {missing}")
    report = ComparisonReport(reference, unit)
    for metric in METRICS:
        for v, z in conditions:
            ref = samples[(v, z, reference)][metric]
            for base in sorted(baselines):
                other = samples[(v, z, base)][metric]
                r = welch_one_tailed(ref, other)
                report.rows.append(TableRow(metric, v, z, base, r.t_statistic, r.welch_dof,
                                            r.p_value, r.n_a, r.n_b, unit))
    return report
