"""Permutation QUBO for phase sequencing, its Ising twin, and decoding.

Variable ``x[i*p + k]`` is 1 when occupied phase ``i`` (row index into
``DelayMatrix.occupied_phases``) takes position ``k`` of the sequence.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Sequence

import numpy as np

from .delays import DelayMatrix

PAPER_GAMMA = 100.0


def auto_gamma(d: DelayMatrix) -> float:
    """Penalty weight large enough that the penalized minimum is a permutation."""
    dmax = float(d.entries.max()) if d.size else 0.0
    return max(PAPER_GAMMA, 2.0 * dmax + 1.0)


def resolve_gamma(d: DelayMatrix, policy: str | float) -> float:
    if isinstance(policy, str):
        if policy == "paper":
            return PAPER_GAMMA
        if policy == "auto":
            return auto_gamma(d)
        return float(policy)
    return float(policy)


def var_index(i: int, k: int, p: int) -> int:
    return i * p + k


def var_position(v: int, p: int) -> tuple[int, int]:
    return divmod(v, p)


@dataclass(frozen=True, eq=False)
class QuboModel:
    num_vars: int
    linear: dict[int, float]
    quadratic: dict[tuple[int, int], float]
    offset: float = 0.0
    gamma: float | None = None
    p: int | None = None
    phases: tuple[int, ...] | None = None  # occupied phase ids labelling the rows

    def __post_init__(self):
        for (a, b) in self.quadratic:
            if not a < b:
                raise ValueError(f"quadratic key {(a, b)} must satisfy a < b")

    def var_index(self, i: int, k: int) -> int:
        return var_index(i, k, self._p)

    def var_position(self, v: int) -> tuple[int, int]:
        return var_position(v, self._p)

    @property
    def _p(self) -> int:
        if self.p is not None:
            return self.p
        p = math.isqrt(self.num_vars)
        if p * p != self.num_vars:
            raise ValueError("model is not a p x p permutation encoding")
        return p

    @cached_property
    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """(linear vector, strictly upper-triangular coupling matrix)."""
        n = self.num_vars
        lin = np.zeros(n)
        for i, w in self.linear.items():
            lin[i] += w
        upper = np.zeros((n, n))
        for (a, b), w in self.quadratic.items():
            upper[a, b] += w
        lin.setflags(write=False)
        upper.setflags(write=False)
        return lin, upper

    @cached_property
    def symmetric(self) -> np.ndarray:
        """Q_quad + Q_quad^T; the Hessian of the relaxed objective."""
        _, upper = self.dense
        s = upper + upper.T
        s.setflags(write=False)
        return s

    def gradient(self, x: np.ndarray) -> np.ndarray:
        lin, _ = self.dense
        return lin + self.symmetric @ x


def build_qubo(d: DelayMatrix, gamma: float = PAPER_GAMMA) -> QuboModel:
    """Expand path cost plus row/column penalties into a QUBO over p^2 variables."""
    p = d.size
    if p < 2:
        raise ValueError(f"need at least 2 occupied phases, got {p}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")

    linear: dict[int, float] = defaultdict(float)
    quad: dict[tuple[int, int], float] = defaultdict(float)

    for i in range(p):
        for j in range(p):
            dij = float(d.entries[i, j])
            if i == j or dij == 0.0:
                continue
            for k in range(p - 1):
                a, b = var_index(i, k, p), var_index(j, k + 1, p)
                quad[(min(a, b), max(a, b))] += dij

    # gamma * (sum(group) - 1)^2 with x^2 = x: -gamma per var, +2 gamma per pair, +gamma
    groups = [[var_index(i, k, p) for k in range(p)] for i in range(p)]
    groups += [[var_index(i, k, p) for i in range(p)] for k in range(p)]
    for g in groups:
        for a_pos, a in enumerate(g):
            linear[a] -= gamma
            for b in g[a_pos + 1:]:
                quad[(min(a, b), max(a, b))] += 2.0 * gamma

    return QuboModel(
        num_vars=p * p,
        linear=dict(linear),
        quadratic=dict(quad),
        offset=2.0 * p * gamma,
        gamma=float(gamma),
        p=p,
        phases=d.occupied_phases,
    )


def _as_vector(m: QuboModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size != m.num_vars:
        raise ValueError(f"expected {m.num_vars} variables, got {x.size}")
    return x


def evaluate(m: QuboModel, x) -> float:
    x = _as_vector(m, x)
    lin, upper = m.dense
    return float(lin @ x + x @ upper @ x + m.offset)


@dataclass(frozen=True, eq=False)
class IsingModel:
    h: dict[int, float]
    J: dict[tuple[int, int], float]
    offset: float
    num_spins: int

    def energy(self, s) -> float:
        s = np.asarray(s, dtype=float).ravel()
        e = self.offset
        e += sum(w * s[i] for i, w in self.h.items())
        e += sum(w * s[a] * s[b] for (a, b), w in self.J.items())
        return float(e)


def to_ising(m: QuboModel) -> IsingModel:
    """Substitute x = (1 + s) / 2 and collect terms."""
    h: dict[int, float] = defaultdict(float)
    J: dict[tuple[int, int], float] = {}
    offset = m.offset
    for i, w in m.linear.items():
        h[i] += w / 2.0
        offset += w / 2.0
    for (a, b), w in m.quadratic.items():
        q = w / 4.0
        J[(a, b)] = J.get((a, b), 0.0) + q
        h[a] += q
        h[b] += q
        offset += q
    h = {i: w for i, w in h.items() if w != 0.0}
    J = {k: w for k, w in J.items() if w != 0.0}
    return IsingModel(h=h, J=J, offset=offset, num_spins=m.num_vars)


@dataclass(frozen=True)
class PhaseSequence:
    order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        if len(set(self.order)) != len(self.order):
            raise ValueError(f"phase repeated in sequence {self.order}")

    @property
    def first(self) -> int:
        return self.order[0]

    def __len__(self) -> int:
        return len(self.order)


class InfeasibleAssignment(ValueError):
    """A binary vector that is not a permutation matrix."""

    def __init__(self, rows: list[int], positions: list[int]):
        self.rows = rows
        self.positions = positions
        super().__init__(
            f"infeasible assignment: phase rows {rows} and positions {positions} "
            "do not sum to exactly one"
        )


def constraint_violations(x, p: int) -> tuple[list[int], list[int]]:
    grid = np.asarray(x).reshape(p, p)
    rows = [int(i) for i in np.flatnonzero(grid.sum(axis=1) != 1)]
    cols = [int(k) for k in np.flatnonzero(grid.sum(axis=0) != 1)]
    return rows, cols


def decode(x, d: DelayMatrix) -> PhaseSequence:
    """Read a phase sequence out of a binary vector.

    Raises InfeasibleAssignment naming the violated phase rows and positions
    (both 0-based) when the p x p reshape is not a permutation matrix.
    """
    p = d.size
    x = np.rint(np.asarray(x, dtype=float).ravel()).astype(int)
    if x.size != p * p:
        raise ValueError(f"expected {p * p} variables, got {x.size}")
    rows, cols = constraint_violations(x, p)
    if rows or cols:
        raise InfeasibleAssignment(rows, cols)
    grid = x.reshape(p, p)
    order = [d.occupied_phases[int(np.flatnonzero(grid[:, k])[0])] for k in range(p)]
    return PhaseSequence(tuple(order))


def is_feasible(x, p: int) -> bool:
    rows, cols = constraint_violations(np.rint(np.asarray(x, dtype=float)), p)
    return not rows and not cols


def encode(seq: PhaseSequence | Sequence[int], d: DelayMatrix) -> np.ndarray:
    order = seq.order if isinstance(seq, PhaseSequence) else tuple(seq)
    p = d.size
    _check_permutation(order, d)
    x = np.zeros(p * p)
    for k, pid in enumerate(order):
        x[var_index(d.occupied_phases.index(pid), k, p)] = 1.0
    return x


def _check_permutation(order: Sequence[int], d: DelayMatrix) -> None:
    if sorted(order) != sorted(d.occupied_phases) or len(set(order)) != len(order):
        raise ValueError(
            f"sequence {tuple(order)} is not a permutation of {d.occupied_phases}"
        )


def sequence_cost(seq: PhaseSequence | Sequence[int], d: DelayMatrix) -> float:
    """Open-loop path cost: sum of delays along consecutive phases, no return leg."""
    order = seq.order if isinstance(seq, PhaseSequence) else tuple(seq)
    _check_permutation(order, d)
    idx = [d.occupied_phases.index(pid) for pid in order]
    return float(sum(d.entries[a, b] for a, b in zip(idx, idx[1:])))


def index_cost(idx: Sequence[int], entries: np.ndarray) -> float:
    return float(sum(entries[a, b] for a, b in zip(idx, idx[1:])))


# -- plain-text interchange --------------------------------------------------

def dump_qubo(m: QuboModel, fh: IO[str]) -> None:
    """Write ``offset``/``lin``/``quad`` lines; ``#`` lines carry p and gamma."""
    if m.p is not None:
        fh.write(f"# p {m.p}\n")
    if m.gamma is not None:
        fh.write(f"# gamma {m.gamma!r}\n")
    if m.phases is not None:
        fh.write(f"# phases {','.join(map(str, m.phases))}\n")
    fh.write(f"offset {m.offset!r}\n")
    for i in sorted(m.linear):
        fh.write(f"lin {i} {m.linear[i]!r}\n")
    for a, b in sorted(m.quadratic):
        fh.write(f"quad {a} {b} {m.quadratic[(a, b)]!r}\n")


def dumps_qubo(m: QuboModel) -> str:
    import io

    buf = io.StringIO()
    dump_qubo(m, buf)
    return buf.getvalue()


def load_qubo(fh: IO[str] | str, num_vars: int | None = None) -> QuboModel:
    text = fh if isinstance(fh, str) else fh.read()
    offset = 0.0
    linear: dict[int, float] = defaultdict(float)
    quad: dict[tuple[int, int], float] = defaultdict(float)
    meta: dict[str, str] = {}
    top = -1
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2:
                meta[parts[0]] = parts[1]
            continue
        parts = line.split()
        try:
            if parts[0] == "offset" and len(parts) == 2:
                offset += float(parts[1])
            elif parts[0] == "lin" and len(parts) == 3:
                i = int(parts[1])
                linear[i] += float(parts[2])
                top = max(top, i)
            elif parts[0] == "quad" and len(parts) == 4:
                a, b, w = int(parts[1]), int(parts[2]), float(parts[3])
                if a == b:
                    linear[a] += w
                else:
                    quad[(min(a, b), max(a, b))] += w
                top = max(top, a, b)
            else:
                raise ValueError
        except ValueError:
            raise ValueError(f"line {lineno}: cannot parse {raw!r}") from None
    p = int(meta["p"]) if "p" in meta else None
    if num_vars is None:
        num_vars = p * p if p is not None else top + 1
    gamma = float(meta["gamma"]) if "gamma" in meta else None
    phases = tuple(int(i) for i in meta["phases"].split(",")) if "phases" in meta else None
    return QuboModel(num_vars, dict(linear), dict(quad), offset, gamma, p, phases)
