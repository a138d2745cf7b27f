"""Discrete-time simulator of one 4-way intersection under VTL control.

Each movement has its own lane (lane index = index in ``MOVEMENTS``).
Positions are distances to the stop line, negative once a vehicle has
crossed; a vehicle leaves the network after clearing the intersection box.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from . import _kernels
from .delays import VehicleSnapshot, build_delay_matrix, occupied_phases
from .phases import MOVEMENTS, PhaseGroup, SignalTiming, movements_conflict, standard_phase_groups
from .solvers import SolverConfig, SolverResult, solve
from .stats import RunMetrics, Trip, summarize

log = logging.getLogger(__name__)

MPH = 0.44704


@dataclass(frozen=True)
class LatencyModel:
    fixed_overhead_s: float = 0.0  # upload + queue + download
    processing_s: float = 0.0

    def __post_init__(self):
        if self.fixed_overhead_s < 0 or self.processing_s < 0:
            raise ValueError("latencies must be non-negative")

    @property
    def total_s(self) -> float:
        return self.fixed_overhead_s + self.processing_s

    @classmethod
    def parse(cls, spec: str) -> "LatencyModel":
        """``none``, ``paper`` or ``custom:<overhead>,<processing>``."""
        if spec == "none":
            return cls()
        if spec == "paper":
            return PAPER_LATENCY
        if spec.startswith("custom:"):
            try:
                a, b = (float(v) for v in spec[len("custom:"):].split(","))
            except ValueError:
                raise ValueError(f"bad latency spec {spec!r}") from None
            return cls(a, b)
        raise ValueError(f"bad latency spec {spec!r}")


PAPER_LATENCY = LatencyModel(fixed_overhead_s=2.793, processing_s=0.197)


@dataclass(frozen=True)
class ScenarioConfig:
    volume_fraction: float = 0.35
    capacity_pcphpl: float = 1800.0
    vtl_zone_m: float = 100.0
    speed_limit_mps: float = 35 * MPH
    approach_length_m: float = 300.0
    sim_duration_s: float = 3600.0
    warmup_s: float = 300.0
    time_step_s: float = 0.1
    timing: SignalTiming = field(default_factory=SignalTiming)
    seed: int = 0
    latency: LatencyModel = field(default_factory=LatencyModel)
    arrivals: str = "deterministic"  # or "exponential"
    gamma_policy: str = "auto"  # "auto", "paper" or a number
    accel_mps2: float = 2.6
    decel_mps2: float = 4.5
    vehicle_length_m: float = 5.0
    standstill_gap_m: float = 2.5
    box_length_m: float = 20.0

    def __post_init__(self):
        positive = (
            "volume_fraction", "capacity_pcphpl", "vtl_zone_m", "speed_limit_mps",
            "approach_length_m", "sim_duration_s", "time_step_s", "accel_mps2",
            "decel_mps2", "vehicle_length_m", "box_length_m",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_s < 0 or self.standstill_gap_m < 0:
            raise ValueError("warmup_s and standstill_gap_m must be non-negative")
        if self.vtl_zone_m > self.approach_length_m:
            raise ValueError("vtl_zone_m cannot exceed approach_length_m")
        if self.arrivals not in ("deterministic", "exponential"):
            raise ValueError(f"unknown arrival process {self.arrivals!r}")

    @property
    def headway_s(self) -> float:
        return 3600.0 / (self.volume_fraction * self.capacity_pcphpl)

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScenarioConfig":
        data = dict(data)
        if isinstance(data.get("timing"), Mapping):
            data["timing"] = SignalTiming(**data["timing"])
        if isinstance(data.get("latency"), Mapping):
            data["latency"] = LatencyModel(**data["latency"])
        elif isinstance(data.get("latency"), str):
            data["latency"] = LatencyModel.parse(data["latency"])
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def generate_arrivals(
    cfg: ScenarioConfig, lane: int, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Arrival times on one lane over the run.

    Deterministic headways by default; ``exponential`` draws headways with
    the same mean from `rng` (seeded from cfg.seed and the lane if omitted).
    """
    h = cfg.headway_s
    if cfg.arrivals == "deterministic":
        return np.arange(0.0, cfg.sim_duration_s, h)
    if rng is None:
        rng = np.random.default_rng([cfg.seed, lane])
    n_max = int(cfg.sim_duration_s / h * 2 + 50)
    times = np.cumsum(rng.exponential(h, size=n_max))
    while times[-1] < cfg.sim_duration_s:  # pragma: no cover - astronomically rare
        times = np.concatenate([times, times[-1] + np.cumsum(rng.exponential(h, size=n_max))])
    return times[times < cfg.sim_duration_s]


class Mode(enum.Enum):
    OPTIMIZING = "optimizing"
    GREEN = "green"
    YELLOW = "yellow"
    ALL_RED = "all_red"


class World:
    """Vehicle arrays plus the kinematics step; controllers act on it."""

    def __init__(self, cfg: ScenarioConfig, arrivals: list[np.ndarray] | None = None):
        self.cfg = cfg
        if arrivals is None:
            arrivals = [generate_arrivals(cfg, lane) for lane in range(len(MOVEMENTS))]
        counts = [len(a) for a in arrivals]
        self.lane_lo = np.cumsum([0] + counts[:-1]).astype(np.int64)
        self.lane_hi = np.cumsum(counts).astype(np.int64)
        n = int(sum(counts))
        self.arrival = np.concatenate(arrivals).astype(float) if n else np.zeros(0)
        self.lane = np.repeat(np.arange(len(MOVEMENTS)), counts)
        self.pos = np.zeros(n)
        self.speed = np.zeros(n)
        self.stopped = np.zeros(n)
        self.exit_t = np.full(n, np.nan)
        self.status = np.zeros(n, dtype=np.int8)
        self.granted = np.zeros(n, dtype=np.bool_)
        self.head = self.lane_lo.copy()
        self.nxt = self.lane_lo.copy()
        self.signal = np.zeros(len(MOVEMENTS), dtype=np.int64)
        self.spacing = cfg.vehicle_length_m + cfg.standstill_gap_m

    @property
    def size(self) -> int:
        return self.arrival.size

    def step(self, t: float) -> int:
        c = self.cfg
        return _kernels.advance(
            t, c.time_step_s, self.lane_lo, self.lane_hi, self.head, self.nxt,
            self.arrival, self.pos, self.speed, self.stopped, self.exit_t,
            self.status, self.granted, self.signal, c.speed_limit_mps, c.accel_mps2,
            c.decel_mps2, c.vehicle_length_m, c.standstill_gap_m, c.box_length_m,
            c.approach_length_m, 0.1,
        )

    def audit(self, t: float) -> tuple[int, int, int, int, int]:
        return _kernels.audit(
            t, self.lane_lo, self.lane_hi, self.head, self.nxt, self.arrival,
            self.pos, self.status, self.spacing,
        )

    def in_zone(self) -> list[VehicleSnapshot]:
        zone = self.cfg.vtl_zone_m
        out = []
        for lane, movement in enumerate(MOVEMENTS):
            lo, hi = self.head[lane], self.nxt[lane]
            for i in range(lo, hi):
                if self.status[i] == 2 and 0.0 <= self.pos[i] <= zone:
                    out.append(VehicleSnapshot(int(i), movement, float(self.pos[i]), float(self.speed[i])))
        return out

    def any_in_zone(self) -> bool:
        zone = self.cfg.vtl_zone_m
        for lane in range(len(MOVEMENTS)):
            lo, hi = self.head[lane], self.nxt[lane]
            if hi > lo:
                p = self.pos[lo:hi]
                s = self.status[lo:hi]
                if np.any((s == 2) & (p >= 0.0) & (p <= zone)):
                    return True
        return False


def _lanes(phase: PhaseGroup) -> list[int]:
    return [MOVEMENTS.index(m) for m in phase.movements]


@dataclass
class ControllerState:
    mode: Mode = Mode.ALL_RED
    phase: PhaseGroup | None = None
    granted: frozenset[int] = frozenset()
    until: float = 0.0
    pending: tuple[Any, float] | None = None  # (sequence, apply_at)


class VTLController:
    """Snapshot -> optimize -> grant -> clear -> yellow -> all-red loop."""

    def __init__(self, cfg: ScenarioConfig, solver: str = "sa", solver_cfg: SolverConfig | None = None):
        self.cfg = cfg
        self.solver = solver
        self.solver_cfg = solver_cfg or SolverConfig()
        self.catalogue = standard_phase_groups()
        self.by_id = {g.id: g for g in self.catalogue}
        self.state = ControllerState()
        self.remaining = 0
        self.optimizations: list[dict] = []
        self.solver_calls = 0
        self._snapshot: list[VehicleSnapshot] = []

    def _grant(self, world: World, phase: PhaseGroup, snapshot: list[VehicleSnapshot], t: float) -> None:
        ids = [v.vehicle_id for v in snapshot if v.movement in phase.movements]
        world.granted[ids] = True
        self.remaining = len(ids)
        self.state = ControllerState(Mode.GREEN, phase, frozenset(ids), t)

    def _decide(self, world: World, t: float) -> None:
        snap = world.in_zone() if world.any_in_zone() else []
        if not snap:
            self.state = ControllerState(Mode.ALL_RED, until=t)
            return
        occupied = occupied_phases(snap, self.catalogue)
        if len(occupied) == 1:
            self._grant(world, occupied[0], snap, t)
            return
        d = build_delay_matrix(snap, self.catalogue, self.cfg.timing)
        cfg = self.solver_cfg.replace(seed=self.cfg.seed * 1_000_003 + self.solver_calls)
        result: SolverResult = solve(self.solver, d, cfg, gamma=self.cfg.gamma_policy)
        self.solver_calls += 1
        apply_at = t + self.cfg.latency.total_s
        entry = result.to_dict(timing=False)
        entry.update(t=round(t, 6), p=d.size, apply_at=round(apply_at, 6))
        self.optimizations.append(entry)
        self._snapshot = snap
        self.state = ControllerState(Mode.OPTIMIZING, until=apply_at, pending=(result.sequence, apply_at))

    def update(self, world: World, t: float, granted_out: int) -> None:
        st = self.state
        eps = 1e-9
        if st.mode is Mode.GREEN:
            self.remaining -= granted_out
            if self.remaining <= 0:
                self.state = ControllerState(Mode.YELLOW, st.phase, until=t + self.cfg.timing.yellow_s)
        elif st.mode is Mode.YELLOW:
            if t >= st.until - eps:
                self.state = ControllerState(Mode.ALL_RED, st.phase, until=t + self.cfg.timing.all_red_s)
        if self.state.mode is Mode.ALL_RED and t >= self.state.until - eps:
            self._decide(world, t)
        if self.state.mode is Mode.OPTIMIZING and t >= self.state.until - eps:
            seq, _ = self.state.pending
            self._grant(world, self.by_id[seq.first], self._snapshot, t)
        self._paint(world)

    def _paint(self, world: World) -> None:
        world.signal[:] = _kernels.RED
        st = self.state
        if st.mode is Mode.GREEN:
            world.signal[_lanes(st.phase)] = _kernels.GREEN_GRANTED
        elif st.mode is Mode.YELLOW:
            world.signal[_lanes(st.phase)] = _kernels.YELLOW

    @property
    def display_movements(self):
        st = self.state
        if st.mode in (Mode.GREEN, Mode.YELLOW):
            return st.phase.movements
        return ()


class FixedCycleController:
    """Round-robin reference: fixed greens over a list of phase groups."""

    def __init__(self, cfg: ScenarioConfig, phase_ids=(1, 2, 5, 6), green_s: float = 15.0):
        self.cfg = cfg
        cat = {g.id: g for g in standard_phase_groups()}
        self.phases = [cat[i] for i in phase_ids]
        self.green_s = green_s
        self.optimizations: list[dict] = []
        self.solver_calls = 0
        self._mode = Mode.GREEN
        self._idx = 0
        self._until = green_s

    def update(self, world: World, t: float, granted_out: int) -> None:
        eps = 1e-9
        timing = self.cfg.timing
        while t >= self._until - eps:
            if self._mode is Mode.GREEN:
                self._mode, self._until = Mode.YELLOW, self._until + timing.yellow_s
            elif self._mode is Mode.YELLOW:
                self._mode, self._until = Mode.ALL_RED, self._until + timing.all_red_s
            else:
                self._idx = (self._idx + 1) % len(self.phases)
                self._mode, self._until = Mode.GREEN, self._until + self.green_s
        world.signal[:] = _kernels.RED
        lanes = _lanes(self.phases[self._idx])
        if self._mode is Mode.GREEN:
            world.signal[lanes] = _kernels.GREEN_ALL
        elif self._mode is Mode.YELLOW:
            world.signal[lanes] = _kernels.YELLOW

    @property
    def display_movements(self):
        if self._mode in (Mode.GREEN, Mode.YELLOW):
            return self.phases[self._idx].movements
        return ()


@dataclass
class RunResult:
    trips: list[Trip]
    metrics: RunMetrics
    optimizations: list[dict]
    conflict_ticks: int
    conservation_violations: int
    overlap_violations: int
    spawned: int
    exited: int
    in_network: int
    latency: LatencyModel
    solver: str

    def latency_accounting(self) -> dict:
        n = len(self.optimizations)
        return {
            "optimizations": n,
            "fixed_overhead_s": self.latency.fixed_overhead_s,
            "processing_s": self.latency.processing_s,
            "end_to_end_s": self.latency.total_s,
            "total_wait_s": n * self.latency.total_s,
        }


def _conflicting(movements) -> bool:
    return any(
        movements_conflict(a, b) for i, a in enumerate(movements) for b in movements[i + 1:]
    )


def run_scenario(
    cfg: ScenarioConfig,
    solver: str = "sa",
    solver_cfg: SolverConfig | None = None,
    controller: str = "vtl",
    check_invariants: bool = True,
    arrivals: list[np.ndarray] | None = None,
) -> RunResult:
    """Simulate `cfg` under the given solver (or the ``round_robin`` reference)."""
    world = World(cfg, arrivals)
    if controller == "vtl":
        ctl = VTLController(cfg, solver, solver_cfg)
    elif controller == "round_robin":
        ctl = FixedCycleController(cfg)
        solver = "round_robin"
    else:
        raise ValueError(f"unknown controller {controller!r}")

    dt = cfg.time_step_s
    steps = int(round(cfg.sim_duration_s / dt))
    conflicts = conservation = overlaps = 0
    granted_out = 0
    for k in range(steps):
        t = k * dt
        ctl.update(world, t, granted_out)
        shown = ctl.display_movements
        if len(shown) > 1 and _conflicting(shown):
            conflicts += 1
        granted_out = world.step(t)
        if check_invariants:
            arrived, waiting, on_road, exited, bad = world.audit(t)
            if arrived != waiting + on_road + exited:
                conservation += 1
            overlaps += bad

    done = np.flatnonzero(world.status == 3)
    # vehicles still queued or on the road count too, censored at the end of
    # the run; dropping them would reward a controller for starving an approach
    end = steps * dt
    trips = []
    for i in np.flatnonzero((world.status > 0) & (world.arrival >= cfg.warmup_s)):
        spawn = float(world.arrival[i])
        exit_s = float(world.exit_t[i]) if world.status[i] == 3 else None
        travel = (exit_s if exit_s is not None else end) - spawn
        trips.append(Trip(int(i), MOVEMENTS[world.lane[i]].name, spawn, exit_s,
                          travel, float(world.stopped[i])))
    trips.sort(key=lambda tr: tr.vehicle_id)
    spawned = int(np.count_nonzero(world.status > 0))
    exited = int(done.size)
    metrics = summarize(trips, solver, cfg.fingerprint())
    log.debug("run %s %s: %d trips, %d optimizations", cfg.fingerprint(), solver,
              len(trips), len(ctl.optimizations))
    return RunResult(
        trips=trips,
        metrics=metrics,
        optimizations=ctl.optimizations,
        conflict_ticks=conflicts,
        conservation_violations=conservation,
        overlap_violations=overlaps,
        spawned=spawned,
        exited=exited,
        in_network=spawned - exited,
        latency=cfg.latency,
        solver=solver,
    )
