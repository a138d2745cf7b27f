"""Phase-sequencing solvers, intersection simulator and experiment runner.

Subcommands::

    vtlqubo phases                       phase catalogue as JSON
    vtlqubo qubo MATRIX [--gamma G]      delay matrix -> QUBO text
    vtlqubo solve INPUT --solver NAME    delay matrix CSV/JSON or QUBO text -> SolverResult JSON
    vtlqubo simulate [...]               one scenario, metrics JSON (and trips CSV)
    vtlqubo run [...]                    experiment grid into --out
    vtlqubo report DIR                   tables for a results directory

Exit codes: 0 ok, 1 failed cells or unusable results, 2 bad configuration.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import re
import sys
from pathlib import Path
from typing import Any, Sequence

from .delays import DelayMatrix
from .experiment import (
    DEFAULT_SEEDS,
    DEFAULT_SOLVERS,
    DEFAULT_VOLUMES,
    DEFAULT_ZONES,
    EXPERIMENT_SOLVER_CONFIG,
    ExperimentPlan,
    ResultsError,
    report,
    run_experiment,
)
from .phases import catalogue_to_json
from .qubo import build_qubo, dumps_qubo, load_qubo, resolve_gamma
from .sim import LatencyModel, ScenarioConfig, run_scenario
from .solvers import SOLVER_NAMES, SolverConfig, solve, solve_model
from .stats import trips_to_csv

log = logging.getLogger("vtlqubo")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- parsing helpers ---------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _seeds(text: str) -> list[int]:
    """``0,1,5`` or an inclusive range ``0-9``, or a mix of both."""
    out: list[int] = []
    for part in _names(text):
        m = re.fullmatch(r"(-?\d+)-(-?\d+)", part)
        try:
            out.extend(range(int(m[1]), int(m[2]) + 1) if m else [int(part)])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    return out


def _latency(text: str) -> LatencyModel:
    try:
        return LatencyModel.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _gamma(text: str) -> str | float:
    if text in ("auto", "paper"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("gamma must be 'auto', 'paper' or a number") from None


def _read_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _split_config(data: dict[str, Any]) -> tuple[dict, dict, dict]:
    """(scenario, solver, plan) sections; a flat object is all scenario keys."""
    if any(k in data for k in ("scenario", "solver", "plan")):
        extra = set(data) - {"scenario", "solver", "plan"}
        if extra:
            raise ConfigError(f"unknown config sections: {sorted(extra)}")
        return dict(data.get("scenario", {})), dict(data.get("solver", {})), dict(data.get("plan", {}))
    return dict(data), {}, {}


def _solver_config(base: SolverConfig, overrides: dict[str, Any]) -> SolverConfig:
    names = {f.name for f in dataclasses.fields(SolverConfig)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
    return base.replace(**overrides)


def _scenario(args, section: dict[str, Any], base: dict[str, Any] | None = None) -> ScenarioConfig:
    data = dict(base or {})
    data.update(section)
    flags = {
        "sim_duration_s": args.duration,
        "warmup_s": args.warmup,
        "arrivals": args.arrivals,
        "gamma_policy": args.gamma,
    }
    for key, value in flags.items():
        if value is not None:
            data[key] = value
    if args.latency is not None:
        data["latency"] = dataclasses.asdict(args.latency)
    return ScenarioConfig.from_dict(data)


# -- subcommands -------------------------------------------------------------------------

def _load_instance(path: str, fmt: str):
    text = Path(path).read_text() if path != "-" else sys.stdin.read()
    if fmt == "auto":
        stripped = text.lstrip()
        if stripped.startswith("{"):
            fmt = "json"
        elif stripped.split(None, 1)[0] in ("offset", "lin", "quad") or stripped.startswith("#"):
            fmt = "qubo"
        else:
            fmt = "csv"
    if fmt == "json":
        return DelayMatrix.from_json(text)
    if fmt == "csv":
        return DelayMatrix.from_csv(text)
    return load_qubo(text)


def cmd_phases(args) -> int:
    print(catalogue_to_json())
    return EXIT_OK


def cmd_qubo(args) -> int:
    d = _load_instance(args.matrix, args.format)
    if not isinstance(d, DelayMatrix):
        raise ConfigError("qubo needs a delay matrix, not a QUBO file")
    sys.stdout.write(dumps_qubo(build_qubo(d, resolve_gamma(d, args.gamma))))
    return EXIT_OK


def cmd_solve(args) -> int:
    instance = _load_instance(args.input, args.format)
    cfg = SolverConfig(seed=args.seed, budget=args.budget)
    if args.bnb_space:
        cfg = cfg.replace(bnb_space=args.bnb_space)
    if isinstance(instance, DelayMatrix):
        result = solve(args.solver, instance, cfg, gamma=args.gamma)
    else:
        result = solve_model(args.solver, instance, cfg)
    print(json.dumps(result.to_dict(timing=not args.no_timing), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario_sec, solver_sec, _ = _split_config(_read_config(args.config))
    overrides = {}
    if args.volume is not None:
        overrides["volume_fraction"] = args.volume
    if args.zone is not None:
        overrides["vtl_zone_m"] = args.zone
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = _scenario(args, {**scenario_sec, **overrides})
    solver_cfg = _solver_config(EXPERIMENT_SOLVER_CONFIG, solver_sec)
    controller = "round_robin" if args.solver == "round_robin" else "vtl"
    result = run_scenario(cfg, solver=args.solver, solver_cfg=solver_cfg, controller=controller)
    if args.trips:
        Path(args.trips).write_text(trips_to_csv(result.trips))
    summary = result.metrics.to_dict()
    summary.pop("per_vehicle")
    summary.update(
        optimizations=len(result.optimizations),
        conflict_ticks=result.conflict_ticks,
        conservation_violations=result.conservation_violations,
        spawned=result.spawned,
        exited=result.exited,
        latency=result.latency_accounting(),
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run(args) -> int:
    scenario_sec, solver_sec, plan_sec = _split_config(_read_config(args.config))
    unknown = set(plan_sec) - {"volumes", "zones", "solvers", "seeds", "out", "workers"}
    if unknown:
        raise ConfigError(f"unknown plan keys: {sorted(unknown)}")

    def pick(flag, key, default):
        return flag if flag is not None else plan_sec.get(key, default)

    base = _scenario(args, scenario_sec, {"arrivals": "exponential"})
    out = pick(args.out, "out", "results")
    plan = ExperimentPlan(
        volumes=pick(args.volumes, "volumes", DEFAULT_VOLUMES),
        zones_m=pick(args.zones, "zones", DEFAULT_ZONES),
        solvers=pick(args.solvers, "solvers", DEFAULT_SOLVERS),
        seeds=pick(args.seeds, "seeds", DEFAULT_SEEDS),
        base=base,
        out=Path(out),
        solver_cfg=_solver_config(EXPERIMENT_SOLVER_CONFIG, solver_sec),
        workers=pick(args.workers, "workers", 1),
    )
    outcome = run_experiment(plan, force=args.force)
    print(f"executed {len(outcome.executed)} cells, skipped {len(outcome.skipped)}, "
          f"failed {len(outcome.failed)}; manifest {outcome.manifest}")
    for cell_id, message in sorted(outcome.failed.items()):
        print(f"FAILED {cell_id}: {message}", file=sys.stderr)
    return EXIT_OK if outcome.ok else EXIT_FAILED


def cmd_report(args) -> int:
    try:
        rep = report(Path(args.results), reference=args.reference, unit=args.unit)
    except ResultsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    sys.stdout.write(rep.summary)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config (scenario/solver/plan sections); flags win")
    p.add_argument("--duration", type=float, help="simulated seconds per run")
    p.add_argument("--warmup", type=float, help="seconds excluded from metrics")
    p.add_argument("--arrivals", choices=("deterministic", "exponential"))
    p.add_argument("--gamma", type=_gamma, help="penalty weight: auto, paper or a number")
    p.add_argument("--latency", type=_latency, metavar="{none|paper|custom:<a>,<b>}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtlqubo", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phases", help="print the phase catalogue")
    p.set_defaults(func=cmd_phases)

    p = sub.add_parser("qubo", help="write the QUBO for a delay matrix")
    p.add_argument("matrix")
    p.add_argument("--gamma", type=_gamma, default="paper")
    p.add_argument("--format", choices=("auto", "csv", "json"), default="auto")
    p.set_defaults(func=cmd_qubo)

    p = sub.add_parser("solve", help="solve one instance")
    p.add_argument("input", help="delay matrix (CSV or JSON) or QUBO text; '-' for stdin")
    p.add_argument("--solver", choices=SOLVER_NAMES, default="sa")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=None, help="max objective evaluations")
    p.add_argument("--gamma", type=_gamma, default="paper",
                   help="penalty weight when building from a delay matrix")
    p.add_argument("--bnb-space", choices=("permutation", "qubo"))
    p.add_argument("--format", choices=("auto", "csv", "json", "qubo"), default="auto")
    p.add_argument("--no-timing", action="store_true", help="omit wall_time_s")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="run one scenario")
    _scenario_flags(p)
    p.add_argument("--solver", choices=(*SOLVER_NAMES, "round_robin"), default="sa")
    p.add_argument("--volume", type=float)
    p.add_argument("--zone", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--trips", help="write the trip CSV here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the experiment grid")
    _scenario_flags(p)
    p.add_argument("--volumes", type=_floats)
    p.add_argument("--zones", type=_floats)
    p.add_argument("--solvers", type=_names)
    p.add_argument("--seeds", type=_seeds, help="e.g. 0-9 or 0,1,2")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true", help="re-run completed cells")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarize a results directory")
    p.add_argument("results")
    p.add_argument("--reference", default="sa")
    p.add_argument("--unit", choices=("vehicle", "seed"), default="vehicle",
                   help="t-test sample: pooled vehicles or per-seed means")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
