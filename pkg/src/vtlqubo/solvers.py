"""Minimizers for the phase-sequencing problem.

``solve_exact`` is the ground truth. The annealer stands in for the quantum
annealer; hill climbing, gradient descent, Adam and branch and bound are the
classical baselines. QUBO-space solvers read out a binary vector; infeasible
readouts go through :func:`repair`.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels
from .delays import DelayMatrix
from .qubo import (
    PAPER_GAMMA,
    PhaseSequence,
    QuboModel,
    build_qubo,
    evaluate,
    index_cost,
    is_feasible,
    resolve_gamma,
    var_index,
)

MAX_EXACT_PHASES = 10


@dataclass(frozen=True)
class SolverConfig:
    seed: int = 0
    budget: int | None = None  # objective evaluations; None = solver default
    # annealing: start temperature = factor * mean |dE| of single flips at
    # random permutation states, cooled geometrically by t_ratio over the sweeps
    sa_sweeps: int = 10_000
    sa_restarts: int = 8
    sa_t_hi_factor: float = 0.25
    sa_t_ratio: float = 10.0
    hc_budget: int | None = None  # None: as many flips as the default annealer makes
    gd_step: float = 0.01
    gd_iters: int = 5_000
    adam_step: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    adam_iters: int = 5_000
    bnb_space: str = "permutation"

    def __post_init__(self):
        if self.budget is not None and self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.bnb_space not in ("permutation", "qubo"):
            raise ValueError(f"unknown bnb_space {self.bnb_space!r}")
        if self.sa_sweeps <= 0 or self.sa_restarts <= 0:
            raise ValueError("annealing needs positive sweeps and restarts")

    def replace(self, **kw) -> "SolverConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class SolverResult:
    sequence: PhaseSequence
    cost_s: float
    raw_energy: float
    feasible_at_readout: bool
    evaluations: int
    wall_time_s: float
    solver_name: str
    budget_exhausted: bool = False
    metadata: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict:
        out = {
            "solver": self.solver_name,
            "sequence": list(self.sequence.order),
            "cost_s": self.cost_s,
            "raw_energy": self.raw_energy,
            "feasible_at_readout": self.feasible_at_readout,
            "evaluations": self.evaluations,
            "budget_exhausted": self.budget_exhausted,
            **self.metadata,
        }
        if timing:
            out["wall_time_s"] = self.wall_time_s
        return out


def _rng_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def delays_from_qubo(m: QuboModel) -> DelayMatrix:
    """Recover the delay matrix from the path couplings x[i,0] * x[j,1]."""
    p = m._p
    entries = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            if i == j:
                continue
            a, b = var_index(i, 0, p), var_index(j, 1, p)
            entries[i, j] = m.quadratic.get((min(a, b), max(a, b)), 0.0)
    # path pairs never share a row or column, so penalty terms cannot leak in
    phases = m.phases if m.phases else tuple(range(1, p + 1))
    return DelayMatrix(tuple(phases), entries)


# -- repair --------------------------------------------------------------------

def _swap_pass(order: list[int], entries: np.ndarray) -> list[int]:
    order = list(order)
    cost = index_cost(order, entries)
    p = len(order)
    for a in range(p):
        for b in range(a + 1, p):
            order[a], order[b] = order[b], order[a]
            c = index_cost(order, entries)
            if c < cost - 1e-12:
                cost = c
            else:
                order[a], order[b] = order[b], order[a]
    return order


def repair(values, entries: np.ndarray) -> list[int]:
    """Greedy matching on the p x p reshape, then one pairwise-swap pass.

    Returns row indices in sequence order. Ties in the matching go to the
    smallest (row, position).
    """
    p = entries.shape[0]
    grid = np.asarray(values, dtype=float).reshape(p, p)
    cells = sorted(
        ((-grid[i, k], i, k) for i in range(p) for k in range(p))
    )
    row_used = [False] * p
    col_used = [False] * p
    order = [-1] * p
    placed = 0
    for _, i, k in cells:
        if not row_used[i] and not col_used[k]:
            row_used[i] = col_used[k] = True
            order[k] = i
            placed += 1
            if placed == p:
                break
    return _swap_pass(order, entries)


def _x_to_order(x: np.ndarray, p: int) -> list[int]:
    grid = np.rint(x).reshape(p, p)
    return [int(np.flatnonzero(grid[:, k])[0]) for k in range(p)]


def _finish(
    name: str,
    d: DelayMatrix,
    m: QuboModel,
    raw_x: np.ndarray,
    values: np.ndarray,
    feasible_x: np.ndarray | None,
    evaluations: int,
    started: float,
    **meta,
) -> SolverResult:
    p = d.size
    raw_bits = (np.asarray(raw_x) >= 0.5).astype(float)
    feasible = is_feasible(raw_bits, p)
    if feasible:
        order = _x_to_order(raw_bits, p)
    else:
        order = repair(values, d.entries)
    if feasible_x is not None:
        alt = _x_to_order(feasible_x, p)
        c_alt, c_cur = index_cost(alt, d.entries), index_cost(order, d.entries)
        if c_alt < c_cur - 1e-9 or (abs(c_alt - c_cur) <= 1e-9 and alt < order):
            order = alt
        meta["best_feasible_seen_s"] = c_alt
    seq = PhaseSequence(tuple(d.occupied_phases[i] for i in order))
    return SolverResult(
        sequence=seq,
        cost_s=index_cost(order, d.entries),
        raw_energy=evaluate(m, raw_bits),
        feasible_at_readout=feasible,
        evaluations=int(evaluations),
        wall_time_s=time.perf_counter() - started,
        solver_name=name,
        metadata={"space": "qubo", "gamma": m.gamma, **meta},
    )


def _single_phase(name: str, d: DelayMatrix, started: float) -> SolverResult:
    return SolverResult(
        PhaseSequence(d.occupied_phases), 0.0, 0.0, True, 0,
        time.perf_counter() - started, name,
    )


def _qubo_inputs(m: QuboModel, d: DelayMatrix | None) -> tuple[DelayMatrix, np.ndarray, np.ndarray]:
    if d is None:
        d = delays_from_qubo(m)
    lin, _ = m.dense
    return d, np.ascontiguousarray(lin), np.ascontiguousarray(m.symmetric)


# -- exact -----------------------------------------------------------------------

def solve_exact(d: DelayMatrix, cfg: SolverConfig | None = None) -> SolverResult:
    """Enumerate all p! sequences; ties go to the lexicographically smallest."""
    started = time.perf_counter()
    p = d.size
    if p < 1:
        raise ValueError("nothing to sequence")
    if p > MAX_EXACT_PHASES:
        raise ValueError(f"refusing to enumerate {p}! sequences (limit p <= {MAX_EXACT_PHASES})")
    if p == 1:
        return _single_phase("exact", d, started)
    e = d.entries
    best_cost = math.inf
    best: tuple[int, ...] | None = None
    # chunk by leading phase to bound memory; permutations() is lexicographic
    for first in range(p):
        rest = [i for i in range(p) if i != first]
        tails = np.array(list(itertools.permutations(rest)), dtype=np.intp)
        if tails.size == 0:
            tails = np.zeros((1, 0), dtype=np.intp)
        paths = np.hstack([np.full((tails.shape[0], 1), first, dtype=np.intp), tails])
        costs = e[paths[:, :-1], paths[:, 1:]].sum(axis=1)
        lo = costs.min()
        if lo < best_cost - 1e-9 * max(1.0, abs(best_cost) if best_cost < math.inf else 1.0):
            k = int(np.flatnonzero(costs <= lo + 1e-9 * max(1.0, abs(lo)))[0])
            best_cost, best = float(lo), tuple(int(i) for i in paths[k])
    order = list(best)
    return SolverResult(
        sequence=PhaseSequence(tuple(d.occupied_phases[i] for i in order)),
        cost_s=index_cost(order, e),
        raw_energy=index_cost(order, e),
        feasible_at_readout=True,
        evaluations=math.factorial(p),
        wall_time_s=time.perf_counter() - started,
        solver_name="exact",
        metadata={"space": "permutation"},
    )


# -- simulated annealing -------------------------------------------------------

def annealing_start_temperature(
    lin: np.ndarray, S: np.ndarray, p: int, rng: np.random.Generator, samples: int = 100
) -> float:
    """Mean |dE| of random single flips taken at random permutation states."""
    total = 0.0
    for _ in range(samples):
        x = np.zeros(p * p)
        x[np.arange(p) * p + rng.permutation(p)] = 1.0
        i = int(rng.integers(p * p))
        total += abs((1.0 - 2.0 * x[i]) * (lin[i] + S[i] @ x))
    return total / samples


def solve_simulated_annealing(
    m: QuboModel, cfg: SolverConfig | None = None, d: DelayMatrix | None = None
) -> SolverResult:
    cfg = cfg or SolverConfig()
    started = time.perf_counter()
    d, lin, S = _qubo_inputs(m, d)
    p, n = d.size, d.size ** 2
    if p == 1:
        return _single_phase("sa", d, started)
    rng = np.random.default_rng(cfg.seed)
    t_hi = max(1.0, cfg.sa_t_hi_factor * annealing_start_temperature(lin, S, p, rng))
    sweeps = cfg.sa_sweeps
    if cfg.budget is not None:
        sweeps = max(1, min(sweeps, cfg.budget // (cfg.sa_restarts * n)))
    alpha = (1.0 / cfg.sa_t_ratio) ** (1.0 / sweeps)
    starts = (rng.random((cfg.sa_restarts, n)) < 0.5).astype(float)
    best_x, _, feas_x, feas_e, evals = _kernels.anneal(
        lin, S, p, starts, t_hi, alpha, sweeps, _rng_seed(rng)
    )
    return _finish(
        "sa", d, m, best_x, best_x, feas_x if np.isfinite(feas_e) else None, evals, started,
        t_hi=t_hi, alpha=alpha, sweeps=sweeps, restarts=cfg.sa_restarts,
    )


# -- hill climbing ---------------------------------------------------------------

def solve_hill_climbing(
    m: QuboModel,
    cfg: SolverConfig | None = None,
    d: DelayMatrix | None = None,
    x0=None,
) -> SolverResult:
    """Steepest single-flip descent with random restarts until the budget runs out."""
    cfg = cfg or SolverConfig()
    started = time.perf_counter()
    d, lin, S = _qubo_inputs(m, d)
    p, n = d.size, d.size ** 2
    if p == 1:
        return _single_phase("hc", d, started)
    rng = np.random.default_rng(cfg.seed)
    budget = cfg.budget if cfg.budget is not None else cfg.hc_budget
    if budget is None:
        budget = cfg.sa_restarts * cfg.sa_sweeps * n
    if x0 is None:
        x0 = (rng.random(n) < 0.5).astype(float)
    x0 = np.asarray(x0, dtype=float).copy()
    best_x, _, feas_x, feas_e, evals = _kernels.hill_climb(
        lin, S, p, x0, budget, _rng_seed(rng)
    )
    return _finish(
        "hc", d, m, best_x, best_x, feas_x if np.isfinite(feas_e) else None, evals, started,
        budget=budget,
    )


# -- relaxed gradient methods ------------------------------------------------------

def _relaxed(name, m, cfg, d, use_adam):
    cfg = cfg or SolverConfig()
    started = time.perf_counter()
    d, lin, S = _qubo_inputs(m, d)
    p, n = d.size, d.size ** 2
    if p == 1:
        return _single_phase(name, d, started)
    rng = np.random.default_rng(cfg.seed)
    x0 = rng.random(n)
    if use_adam:
        step, iters = cfg.adam_step, cfg.adam_iters
    else:
        step, iters = cfg.gd_step, cfg.gd_iters
    if cfg.budget is not None:
        iters = min(iters, cfg.budget)
    # steps are taken on the objective divided by its largest coefficient, so
    # the step size does not have to track gamma or the delay magnitudes
    scale = max(float(np.abs(lin).max()), float(np.abs(S).max())) or 1.0
    x, ran = _kernels.projected_descent(
        lin / scale, S / scale, x0, step, iters, use_adam,
        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
    )
    grid = x.reshape(p, p)
    residual = float(max(np.abs(grid.sum(0) - 1).max(), np.abs(grid.sum(1) - 1).max()))
    return _finish(name, d, m, x, x, None, ran, started, step=step, iterations=ran,
                   scale=scale, constraint_residual=residual)


def solve_gradient_descent(m, cfg=None, d=None) -> SolverResult:
    return _relaxed("gd", m, cfg, d, use_adam=False)


def solve_adam(m, cfg=None, d=None) -> SolverResult:
    return _relaxed("adam", m, cfg, d, use_adam=True)


def relaxed_objective(m: QuboModel, x) -> float:
    """The QUBO polynomial evaluated at a point of the unit box."""
    return evaluate(m, x)


# -- branch and bound ------------------------------------------------------------------

class _Exhausted(Exception):
    pass


def solve_branch_and_bound(d: DelayMatrix, cfg: SolverConfig | None = None) -> SolverResult:
    """Depth-first B&B over partial sequences, children in index order.

    Bound: accumulated cost plus each unplaced phase's cheapest incoming edge.
    ``cfg.budget`` caps the number of generated nodes (None = unlimited).
    """
    cfg = cfg or SolverConfig()
    started = time.perf_counter()
    p = d.size
    if p < 1:
        raise ValueError("nothing to sequence")
    if p == 1:
        return _single_phase("bnb", d, started)
    e = d.entries
    masked = e + np.diag(np.full(p, np.inf))
    min_in = masked.min(axis=0).tolist()
    rows = e.tolist()
    budget = cfg.budget if cfg.budget is not None else math.inf

    state = {"nodes": 0, "best": math.inf, "best_path": None, "cut_path": None}
    path: list[int] = []
    used = [False] * p

    def dfs(acc: float, rem: float) -> None:
        if len(path) == p:
            if acc < state["best"]:
                state["best"] = acc
                state["best_path"] = list(path)
            return
        last = path[-1] if path else -1
        for j in range(p):
            if used[j]:
                continue
            if state["nodes"] >= budget:
                state["cut_path"] = list(path)
                raise _Exhausted
            state["nodes"] += 1
            new_acc = acc + rows[last][j] if last >= 0 else 0.0
            new_rem = rem - min_in[j]
            if new_acc + new_rem >= state["best"]:
                continue
            path.append(j)
            used[j] = True
            dfs(new_acc, new_rem)
            path.pop()
            used[j] = False

    exhausted = False
    try:
        dfs(0.0, float(sum(min_in)))
    except _Exhausted:
        exhausted = True

    order = state["best_path"]
    if order is None:
        # nothing complete yet: finish the interrupted branch nearest-neighbour style
        order = list(state["cut_path"] or [])
        while len(order) < p:
            left = [j for j in range(p) if j not in order]
            if order:
                left.sort(key=lambda j: (rows[order[-1]][j], j))
            order.append(left[0])
    cost = index_cost(order, e)
    return SolverResult(
        sequence=PhaseSequence(tuple(d.occupied_phases[i] for i in order)),
        cost_s=cost,
        raw_energy=cost,
        feasible_at_readout=True,
        evaluations=state["nodes"],
        wall_time_s=time.perf_counter() - started,
        solver_name="bnb",
        budget_exhausted=exhausted,
        metadata={"space": "permutation", "budget": None if budget == math.inf else int(budget)},
    )


def solve_branch_and_bound_qubo(
    m: QuboModel, cfg: SolverConfig | None = None, d: DelayMatrix | None = None
) -> SolverResult:
    """Depth-first B&B over the binary variables of the penalized QUBO.

    Lower bound for a partial assignment: fixed energy plus, for each free
    variable, min(0, its field from fixed ones plus its negative couplings).
    """
    cfg = cfg or SolverConfig()
    started = time.perf_counter()
    d, lin, S = _qubo_inputs(m, d)
    p, n = d.size, d.size ** 2
    if p == 1:
        return _single_phase("bnb", d, started)
    budget = cfg.budget if cfg.budget is not None else math.inf
    neg = np.minimum(S, 0.0)
    x = np.zeros(n)
    state = {"nodes": 0, "best": math.inf, "best_x": None}

    def bound(depth: int, fixed_e: float, field: np.ndarray) -> float:
        if depth == n:
            return fixed_e
        free = slice(depth, n)
        c = field[free] + neg[free, free].sum(axis=1) * 0.5
        return fixed_e + np.minimum(0.0, c).sum()

    def dfs(depth: int, fixed_e: float, field: np.ndarray) -> None:
        if depth == n:
            if fixed_e < state["best"]:
                state["best"] = fixed_e
                state["best_x"] = x.copy()
            return
        prefer_one = field[depth] < 0
        for val in ((1.0, 0.0) if prefer_one else (0.0, 1.0)):
            if state["nodes"] >= budget:
                raise _Exhausted
            state["nodes"] += 1
            if val:
                e_new = fixed_e + field[depth]
                f_new = field + S[:, depth]
            else:
                e_new, f_new = fixed_e, field
            if bound(depth + 1, e_new, f_new) >= state["best"]:
                continue
            x[depth] = val
            dfs(depth + 1, e_new, f_new)
            x[depth] = 0.0

    exhausted = False
    try:
        dfs(0, 0.0, lin.copy())
    except _Exhausted:
        exhausted = True
    raw = state["best_x"] if state["best_x"] is not None else x.copy()
    res = _finish("bnb", d, m, raw, raw, None, state["nodes"], started)
    res.budget_exhausted = exhausted
    return res


# -- dispatch ----------------------------------------------------------------------------

SOLVER_NAMES = ("exact", "sa", "hc", "gd", "adam", "bnb")
BASELINES = ("hc", "gd", "adam", "bnb")

_QUBO_SOLVERS: dict[str, Callable[..., SolverResult]] = {
    "sa": solve_simulated_annealing,
    "hc": solve_hill_climbing,
    "gd": solve_gradient_descent,
    "adam": solve_adam,
}


def solve(
    name: str,
    d: DelayMatrix,
    cfg: SolverConfig | None = None,
    gamma: str | float = PAPER_GAMMA,
) -> SolverResult:
    """Run solver `name` on delay matrix `d`, building the QUBO when needed."""
    cfg = cfg or SolverConfig()
    if name not in SOLVER_NAMES:
        raise ValueError(f"unknown solver {name!r}; choose from {SOLVER_NAMES}")
    if d.size == 1 or name == "exact":
        return solve_exact(d, cfg) if name == "exact" else _single_phase(name, d, time.perf_counter())
    if name == "bnb" and cfg.bnb_space == "permutation":
        return solve_branch_and_bound(d, cfg)
    m = build_qubo(d, resolve_gamma(d, gamma))
    if name == "bnb":
        return solve_branch_and_bound_qubo(m, cfg, d)
    return _QUBO_SOLVERS[name](m, cfg, d)


def solve_model(name: str, m: QuboModel, cfg: SolverConfig | None = None) -> SolverResult:
    """Like :func:`solve` for a prebuilt QUBO; QUBO solvers use it as given."""
    cfg = cfg or SolverConfig()
    if name not in SOLVER_NAMES:
        raise ValueError(f"unknown solver {name!r}; choose from {SOLVER_NAMES}")
    d = delays_from_qubo(m)
    if d.size == 1 or name == "exact":
        return solve_exact(d, cfg) if name == "exact" else _single_phase(name, d, time.perf_counter())
    if name == "bnb":
        if cfg.bnb_space == "permutation":
            return solve_branch_and_bound(d, cfg)
        return solve_branch_and_bound_qubo(m, cfg, d)
    return _QUBO_SOLVERS[name](m, cfg, d)
