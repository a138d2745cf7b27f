"""Scenario-grid runs, on-disk results and the comparison report.

Layout of an output directory::

    cells/<cell_id>/cell.json         scenario, solver, fingerprint
    cells/<cell_id>/trips.csv
    cells/<cell_id>/metrics.json
    cells/<cell_id>/solver_log.jsonl  one SolverResult per optimization
    manifest.json                     every cell file with its sha256
    report/                           written by :func:`report`

Nothing written here carries wall-clock times, so identical plans give
byte-identical files.
"""
from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .sim import ScenarioConfig, run_scenario
from .solvers import SOLVER_NAMES, SolverConfig
from .stats import (
    DegenerateSample,
    RunMetrics,
    experiment_table,
    trips_to_csv,
)

log = logging.getLogger(__name__)

DEFAULT_VOLUMES = (0.35, 0.70, 1.05)
DEFAULT_ZONES = (50.0, 75.0, 100.0)
DEFAULT_SOLVERS = ("sa", "hc", "gd", "adam", "bnb")
DEFAULT_SEEDS = tuple(range(10))
# library defaults: hill climbing gets the annealer's flip count as its budget
EXPERIMENT_SOLVER_CONFIG = SolverConfig()
CELL_FILES = ("cell.json", "trips.csv", "metrics.json", "solver_log.jsonl")


class ResultsError(RuntimeError):
    """Missing or corrupt results directory."""


@dataclass(frozen=True)
class Cell:
    volume: float
    zone_m: float
    solver: str
    seed: int

    @property
    def cell_id(self) -> str:
        return f"v{self.volume:g}_z{self.zone_m:g}_{self.solver}_s{self.seed}"


@dataclass(frozen=True)
class ExperimentPlan:
    volumes: Sequence[float] = DEFAULT_VOLUMES
    zones_m: Sequence[float] = DEFAULT_ZONES
    solvers: Sequence[str] = DEFAULT_SOLVERS
    seeds: Sequence[int] = DEFAULT_SEEDS
    base: ScenarioConfig = field(default_factory=lambda: ScenarioConfig(arrivals="exponential"))
    out: Path = Path("results")
    solver_cfg: SolverConfig = EXPERIMENT_SOLVER_CONFIG
    workers: int = 1

    def __post_init__(self):
        for name in ("volumes", "zones_m", "solvers", "seeds"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"{name} must not be empty")
            object.__setattr__(self, name, values)
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be unique")
        unknown = [s for s in self.solvers if s not in SOLVER_NAMES]
        if unknown:
            raise ValueError(f"unknown solvers: {unknown}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        object.__setattr__(self, "out", Path(self.out))
        # validates every grid point up front
        for cell in self.cells():
            self.scenario(cell)

    def cells(self) -> list[Cell]:
        return [
            Cell(float(v), float(z), s, int(seed))
            for v in self.volumes for z in self.zones_m for s in self.solvers for seed in self.seeds
        ]

    def scenario(self, cell: Cell) -> ScenarioConfig:
        return self.base.replace(volume_fraction=cell.volume, vtl_zone_m=cell.zone_m, seed=cell.seed)

    def to_dict(self) -> dict:
        return {
            "volumes": list(self.volumes),
            "zones_m": list(self.zones_m),
            "solvers": list(self.solvers),
            "seeds": list(self.seeds),
            "base": self.base.to_dict(),
            "solver_cfg": dataclasses.asdict(self.solver_cfg),
        }


@dataclass
class ExperimentOutcome:
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    manifest: Path | None = None

    @property
    def ok(self) -> bool:
        return not self.failed


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cell_complete(out: Path, cell: Cell, cfg: ScenarioConfig | None = None,
                  solver_cfg: SolverConfig | None = None) -> bool:
    """All cell files present and, when given, produced by the same configuration."""
    d = out / "cells" / cell.cell_id
    if not all((d / name).is_file() for name in CELL_FILES):
        return False
    if cfg is None and solver_cfg is None:
        return True
    try:
        meta = json.loads((d / "cell.json").read_text())
    except json.JSONDecodeError:
        return False
    if cfg is not None and meta.get("fingerprint") != cfg.fingerprint():
        return False
    return solver_cfg is None or meta.get("solver_cfg") == dataclasses.asdict(solver_cfg)


def run_cell(cell: Cell, cfg: ScenarioConfig, solver_cfg: SolverConfig, out: Path) -> str:
    """Simulate one cell and move its files into place in one rename."""
    result = run_scenario(cfg, solver=cell.solver, solver_cfg=solver_cfg)
    if result.conflict_ticks or result.conservation_violations or result.overlap_violations:
        raise RuntimeError(
            f"invariant violated: conflicts={result.conflict_ticks} "
            f"conservation={result.conservation_violations} overlaps={result.overlap_violations}"
        )
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=cells_dir, prefix=f".{cell.cell_id}."))
    try:
        meta = {
            **dataclasses.asdict(cell),
            "cell_id": cell.cell_id,
            "fingerprint": cfg.fingerprint(),
            "scenario": cfg.to_dict(),
            "solver_cfg": dataclasses.asdict(solver_cfg),
            "spawned": result.spawned,
            "exited": result.exited,
            "latency": result.latency_accounting(),
        }
        (tmp / "cell.json").write_text(_dumps(meta))
        (tmp / "trips.csv").write_text(trips_to_csv(result.trips))
        (tmp / "metrics.json").write_text(_dumps(result.metrics.to_dict()))
        (tmp / "solver_log.jsonl").write_text(
            "".join(json.dumps(e, sort_keys=True) + "\n" for e in result.optimizations)
        )
        final = cells_dir / cell.cell_id
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return cell.cell_id


def _run_cell_args(args):
    return run_cell(*args)


def write_manifest(plan: ExperimentPlan) -> Path:
    """Manifest of every completed cell in the plan, with file hashes."""
    out = plan.out
    entries = {}
    for cell in plan.cells():
        if not cell_complete(out, cell, plan.scenario(cell), plan.solver_cfg):
            continue
        d = out / "cells" / cell.cell_id
        entries[cell.cell_id] = {
            **dataclasses.asdict(cell),
            "fingerprint": plan.scenario(cell).fingerprint(),
            "files": {
                f"cells/{cell.cell_id}/{name}": _sha256(d / name) for name in CELL_FILES
            },
        }
    path = out / "manifest.json"
    _atomic_write(path, _dumps({"plan": plan.to_dict(), "cells": entries}))
    return path


def run_experiment(plan: ExperimentPlan, force: bool = False) -> ExperimentOutcome:
    """Run every cell of `plan`; completed cells are skipped unless `force`."""
    plan.out.mkdir(parents=True, exist_ok=True)
    outcome = ExperimentOutcome()
    todo = []
    for cell in plan.cells():
        if not force and cell_complete(plan.out, cell, plan.scenario(cell), plan.solver_cfg):
            outcome.skipped.append(cell.cell_id)
        else:
            todo.append((cell, plan.scenario(cell), plan.solver_cfg, plan.out))
    log.info("%d cells to run, %d already complete", len(todo), len(outcome.skipped))

    if plan.workers == 1 or len(todo) <= 1:
        for args in todo:
            try:
                outcome.executed.append(run_cell(*args))
            except Exception as exc:  # reported per cell, the rest still run
                log.error("cell %s failed: %s", args[0].cell_id, exc)
                outcome.failed[args[0].cell_id] = f"{type(exc).__name__}: {exc}"
    else:
        with concurrent.futures.ProcessPoolExecutor(plan.workers) as pool:
            futures = {pool.submit(_run_cell_args, args): args[0] for args in todo}
            for fut in concurrent.futures.as_completed(futures):
                cell = futures[fut]
                try:
                    outcome.executed.append(fut.result())
                except Exception as exc:
                    log.error("cell %s failed: %s", cell.cell_id, exc)
                    outcome.failed[cell.cell_id] = f"{type(exc).__name__}: {exc}"
        outcome.executed.sort()
    outcome.manifest = write_manifest(plan)
    return outcome


# -- report ------------------------------------------------------------------------

@dataclass
class CellResult:
    cell: Cell
    metrics: RunMetrics
    optimizations: list[dict]
    latency: dict


def load_results(out: Path) -> list[CellResult]:
    """Read every cell listed in the manifest, checking the recorded hashes."""
    out = Path(out)
    manifest_path = out / "manifest.json"
    if not manifest_path.is_file():
        raise ResultsError(f"no results in {out}: manifest.json not found")
    try:
        manifest = json.loads(manifest_path.read_text())
        entries = manifest["cells"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ResultsError(f"corrupt manifest in {out}: {exc}") from None
    if not entries:
        raise ResultsError(f"no results in {out}: the manifest lists no cells")
    results = []
    for cell_id in sorted(entries):
        entry = entries[cell_id]
        for rel, digest in entry["files"].items():
            path = out / rel
            if not path.is_file():
                raise ResultsError(f"missing result file {rel}")
            if _sha256(path) != digest:
                raise ResultsError(f"hash mismatch for {rel}")
        d = out / "cells" / cell_id
        try:
            cell = Cell(float(entry["volume"]), float(entry["zone_m"]), entry["solver"], int(entry["seed"]))
            metrics = RunMetrics.from_dict(json.loads((d / "metrics.json").read_text()))
            optimizations = [
                json.loads(line) for line in (d / "solver_log.jsonl").read_text().splitlines() if line
            ]
            latency = json.loads((d / "cell.json").read_text())["latency"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ResultsError(f"corrupt cell {cell_id}: {exc}") from None
        results.append(CellResult(cell, metrics, optimizations, latency))
    return results


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return math.nan, math.nan
    mean = math.fsum(a) / a.size
    if a.size < 2:
        return mean, math.nan
    var = math.fsum((a - mean) ** 2) / (a.size - 1)
    return mean, math.sqrt(var / a.size)


def _csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{x:.6g}" if isinstance(x, float) else x for x in row])
    return buf.getvalue()


@dataclass
class Report:
    aggregates_csv: str
    welch_csv: str
    welch_text: str
    costs_csv: str
    latency_csv: str
    summary: str
    gnuplot: dict[str, str]
    samples: dict[tuple[float, float, str], dict[str, list[float]]]

    def write(self, directory: Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {
            "aggregates.csv": self.aggregates_csv,
            "welch.csv": self.welch_csv,
            "welch.txt": self.welch_text,
            "costs.csv": self.costs_csv,
            "latency.csv": self.latency_csv,
            "summary.txt": self.summary,
            **self.gnuplot,
        }
        written = []
        for name, text in files.items():
            path = directory / name
            _atomic_write(path, text)
            written.append(path)
        return written


UNITS = {"vehicle": "per-vehicle pooled", "seed": "per-seed means"}


def build_report(results: Sequence[CellResult], reference: str = "sa", unit: str = "vehicle") -> Report:
    """Aggregates, Welch tables, per-solver sequence cost and latency accounting.

    `unit` picks the t-test sample: every vehicle pooled over seeds
    (``vehicle``) or one mean per seed (``seed``).
    """
    if unit not in UNITS:
        raise ValueError(f"unit must be one of {sorted(UNITS)}")
    if not results:
        raise ResultsError("no results to report")
    groups: dict[tuple[float, float, str], list[CellResult]] = {}
    for r in results:
        groups.setdefault((r.cell.volume, r.cell.zone_m, r.cell.solver), []).append(r)
    keys = sorted(groups)

    samples = {}
    agg_rows = []
    for key in keys:
        runs = groups[key]
        delay = [pv[0] for r in runs for pv in r.metrics.per_vehicle]
        travel = [pv[1] for r in runs for pv in r.metrics.per_vehicle]
        if unit == "vehicle":
            samples[key] = {"delay": delay, "travel_time": travel}
        else:
            done = [r.metrics for r in runs if not r.metrics.empty]
            samples[key] = {"delay": [m.mean_delay_s for m in done],
                            "travel_time": [m.mean_travel_s for m in done]}
        md, sd = _mean_se(delay)
        mt, st = _mean_se(travel)
        run_means = [r.metrics.mean_delay_s for r in runs if r.metrics.mean_delay_s is not None]
        rm, rse = _mean_se(run_means)
        agg_rows.append([
            key[0], key[1], key[2], len(runs), len(delay),
            sum(r.metrics.unfinished for r in runs), md, sd, mt, st, rm, rse,
        ])
    aggregates = _csv(
        ["volume", "zone_m", "solver", "runs", "vehicles", "unfinished", "mean_delay_s",
         "se_delay_s", "mean_travel_s", "se_travel_s", "mean_of_run_delay_s", "se_of_run_delay_s"],
        agg_rows,
    )

    solvers = sorted({k[2] for k in keys})
    welch_csv = welch_text = ""
    if reference in solvers and len(solvers) > 1:
        try:
            table = experiment_table(samples, reference=reference, unit=UNITS[unit])
            welch_csv, welch_text = table.to_csv(), table.to_text()
        except (KeyError, DegenerateSample) as exc:
            welch_text = f"Welch tables unavailable: {exc}\n"
    else:
        welch_text = f"Welch tables need the reference solver {reference!r} and a baseline\n"

    # sequence cost of every optimization, per solver and per volume
    cost_rows = []
    by_solver: dict[tuple[str, float | None], list[dict]] = {}
    for r in results:
        by_solver.setdefault((r.cell.solver, None), []).extend(r.optimizations)
        by_solver.setdefault((r.cell.solver, r.cell.volume), []).extend(r.optimizations)
    for solver, volume in sorted(by_solver, key=lambda k: (k[0], -1.0 if k[1] is None else k[1])):
        opts = by_solver[(solver, volume)]
        costs = [o["cost_s"] for o in opts]
        mc, sc = _mean_se(costs)
        mp = _mean_se([o["p"] for o in opts])[0]
        feas = _mean_se([1.0 if o["feasible_at_readout"] else 0.0 for o in opts])[0]
        cost_rows.append(["all" if volume is None else volume, solver, len(opts), mc, sc, mp, feas])
    costs_csv = _csv(
        ["volume", "solver", "optimizations", "mean_cost_s", "se_cost_s", "mean_phases",
         "feasible_readout_rate"],
        cost_rows,
    )

    lat_rows = []
    for key in keys:
        runs = groups[key]
        lat = runs[0].latency
        if lat["end_to_end_s"] <= 0:
            continue
        n = sum(r.latency["optimizations"] for r in runs)
        lat_rows.append([key[0], key[1], key[2], n, lat["fixed_overhead_s"], lat["processing_s"],
                         lat["end_to_end_s"], n * lat["end_to_end_s"] / len(runs)])
    latency_csv = _csv(
        ["volume", "zone_m", "solver", "optimizations", "fixed_overhead_s", "processing_s",
         "end_to_end_s", "wait_per_run_s"],
        lat_rows,
    )

    gnuplot = {}
    volumes = sorted({k[0] for k in keys})
    for zone in sorted({k[1] for k in keys}):
        for metric, col in (("delay", 6), ("travel", 8)):
            lines = ["# volume " + " ".join(f"{s}_mean {s}_se" for s in solvers)]
            by_key = {(row[0], row[1], row[2]): row for row in agg_rows}
            for v in volumes:
                cells = []
                for s in solvers:
                    row = by_key.get((v, zone, s))
                    cells += ["nan", "nan"] if row is None else [f"{row[col]:.6g}", f"{row[col + 1]:.6g}"]
                lines.append(f"{v:g} " + " ".join(cells))
            gnuplot[f"{metric}_zone{zone:g}.dat"] = "\n".join(lines) + "\n"

    summary_lines = [
        f"cells: {len(results)}, conditions: {len(keys)}, solvers: {', '.join(solvers)}",
        "",
        "mean stopped delay / travel time per condition (s, per-vehicle pooled over seeds)",
    ]
    for row in agg_rows:
        summary_lines.append(
            f"vol={row[0]:<5g} zone={row[1]:<5g} {row[2]:<6} n={row[4]:<6d} "
            f"delay={row[6]:8.2f} +/- {row[7]:.2f}  travel={row[8]:8.2f} +/- {row[9]:.2f}"
        )
    summary_lines += ["", welch_text.rstrip(), "", "mean per-optimization sequence cost (s)"]
    for row in cost_rows:
        if row[0] == "all":
            summary_lines.append(f"{row[1]:<6} n={row[2]:<6d} cost={row[3]:.3f}  "
                                 f"feasible_readout={row[6]:.3f}")
    if lat_rows:
        summary_lines += ["", "latency accounting: see latency.csv"]
    return Report(
        aggregates_csv=aggregates,
        welch_csv=welch_csv,
        welch_text=welch_text,
        costs_csv=costs_csv,
        latency_csv=latency_csv,
        summary="\n".join(summary_lines) + "\n",
        gnuplot=gnuplot,
        samples=samples,
    )


def report(out: Path, reference: str = "sa", write: bool = True, unit: str = "vehicle") -> Report:
    """Build the report for a results directory and write it under ``report/``."""
    rep = build_report(load_results(Path(out)), reference=reference, unit=unit)
    if write:
        rep.write(Path(out) / "report")
    return rep
