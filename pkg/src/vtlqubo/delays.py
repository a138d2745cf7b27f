"""ETAs and the asymmetric phase-transition stopped-delay matrix."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from .phases import Movement, PhaseGroup, SignalTiming

STOPPED_SPEED_MPS = 0.1
ARRIVAL_TOLERANCE_M = 2.0


@dataclass(frozen=True)
class VehicleSnapshot:
    vehicle_id: Hashable
    movement: Movement
    distance_to_stop_line_m: float
    speed_mps: float


def eta(v: VehicleSnapshot) -> float:
    """Seconds until `v` reaches the stop line.

    Standing vehicles (speed 0, e.g. in the stop-line queue) and vehicles at
    the line count as arrived and get 0. A crawling vehicle below the stopped
    threshold is arrived within the tolerance; further away it uses the
    threshold speed so the quotient stays finite.
    """
    dist = v.distance_to_stop_line_m
    if dist <= 0.0 or v.speed_mps <= 0.0:
        return 0.0
    if v.speed_mps < STOPPED_SPEED_MPS:
        if dist <= ARRIVAL_TOLERANCE_M:
            return 0.0
        return dist / STOPPED_SPEED_MPS
    return dist / v.speed_mps


def _members(phase: PhaseGroup, vehicles: Iterable[VehicleSnapshot]) -> list[VehicleSnapshot]:
    return [v for v in vehicles if v.movement in phase.movements]


def last_vehicle_eta(phase: PhaseGroup, vehicles: Sequence[VehicleSnapshot]) -> float:
    """ETA of the phase's last vehicle.

    Per movement, the furthest vehicle (by distance) is the candidate; the
    larger of the candidates' ETAs wins.
    """
    candidates = []
    for movement in phase.movements:
        lane = [v for v in vehicles if v.movement == movement]
        if lane:
            candidates.append(eta(max(lane, key=lambda v: v.distance_to_stop_line_m)))
    if not candidates:
        raise ValueError(f"phase {phase.id} has no vehicles in the zone")
    return max(candidates)


def transition_delay(
    from_phase: PhaseGroup,
    to_phase: PhaseGroup,
    vehicles: Sequence[VehicleSnapshot],
    timing: SignalTiming,
) -> float:
    """Total stopped delay inflicted on `to_phase` when `from_phase` goes first."""
    if from_phase.id == to_phase.id:
        raise ValueError("transition delay needs two distinct phases")
    targets = _members(to_phase, vehicles)
    if not targets:
        raise ValueError(f"phase {to_phase.id} has no vehicles in the zone")
    t_from = last_vehicle_eta(from_phase, vehicles)
    clearance = timing.clearance_s
    return float(sum(max(0.0, t_from - eta(v) + clearance) for v in targets))


@dataclass(frozen=True)
class DelayMatrix:
    """Delays between occupied phases; ``entries[i, j]`` is phase i -> phase j."""

    occupied_phases: tuple[int, ...]
    entries: np.ndarray

    def __post_init__(self):
        p = len(self.occupied_phases)
        entries = np.asarray(self.entries, dtype=float).reshape(p, p)
        if np.any(entries < 0) or not np.all(np.isfinite(entries)):
            raise ValueError("delay entries must be finite and non-negative")
        entries = entries.copy()
        np.fill_diagonal(entries, 0.0)
        entries.setflags(write=False)
        object.__setattr__(self, "occupied_phases", tuple(int(i) for i in self.occupied_phases))
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return len(self.occupied_phases)

    @classmethod
    def from_array(cls, entries, phases: Sequence[int] | None = None) -> "DelayMatrix":
        entries = np.asarray(entries, dtype=float)
        if phases is None:
            phases = range(1, entries.shape[0] + 1)
        return cls(tuple(phases), entries)

    def to_json(self) -> str:
        return json.dumps(
            {"occupied_phases": list(self.occupied_phases), "entries": self.entries.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "DelayMatrix":
        data = json.loads(text)
        return cls(tuple(data["occupied_phases"]), np.asarray(data["entries"], dtype=float))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", *self.occupied_phases])
        for pid, row in zip(self.occupied_phases, self.entries):
            w.writerow([pid, *(repr(float(x)) for x in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DelayMatrix":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        header = rows[0]
        if header[0].strip().lower() == "phase":
            phases = [int(x) for x in header[1:]]
            body = [[float(x) for x in r[1:]] for r in rows[1:]]
        else:  # bare numeric matrix
            body = [[float(x) for x in r] for r in rows]
            phases = list(range(1, len(body) + 1))
        return cls(tuple(phases), np.asarray(body, dtype=float))


def occupied_phases(
    vehicles: Sequence[VehicleSnapshot], catalogue: Sequence[PhaseGroup]
) -> list[PhaseGroup]:
    present = {v.movement for v in vehicles}
    return [g for g in catalogue if present.intersection(g.movements)]


def build_delay_matrix(
    vehicles: Sequence[VehicleSnapshot],
    catalogue: Sequence[PhaseGroup],
    timing: SignalTiming,
) -> DelayMatrix:
    """Delay matrix restricted to occupied phases, in catalogue order."""
    phases = occupied_phases(vehicles, catalogue)
    p = len(phases)
    entries = np.zeros((p, p))
    if p >= 2:
        # per-phase ETA lists are reused across every row
        last = [last_vehicle_eta(g, vehicles) for g in phases]
        etas = [np.array([eta(v) for v in _members(g, vehicles)]) for g in phases]
        clearance = timing.clearance_s
        for i in range(p):
            for j in range(p):
                if i != j:
                    entries[i, j] = np.maximum(0.0, last[i] - etas[j] + clearance).sum()
    return DelayMatrix(tuple(g.id for g in phases), entries)
