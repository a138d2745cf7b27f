"""Compiled inner loops. Energies here exclude the model offset."""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _energy(lin, S, x):
    n = lin.size
    e = 0.0
    for i in range(n):
        if x[i] != 0.0:
            e += lin[i]
            for j in range(i + 1, n):
                if x[j] != 0.0:
                    e += S[i, j]
    return e


@numba.njit(cache=True)
def _flip(S, x, field, i, rowc, colc, p):
    """Flip bit i, update local fields and row/column counts; returns new bad-count delta."""
    sgn = 1.0 - 2.0 * x[i]
    x[i] = 1.0 - x[i]
    n = x.size
    for j in range(n):
        field[j] += sgn * S[j, i]
    r = i // p
    c = i - r * p
    before = (rowc[r] != 1) + (colc[c] != 1)
    step = 1 if sgn > 0 else -1
    rowc[r] += step
    colc[c] += step
    after = (rowc[r] != 1) + (colc[c] != 1)
    return after - before


@numba.njit(cache=True)
def _counts(x, p):
    rowc = np.zeros(p, np.int64)
    colc = np.zeros(p, np.int64)
    for v in range(p * p):
        if x[v] != 0.0:
            rowc[v // p] += 1
            colc[v % p] += 1
    bad = 0
    for i in range(p):
        bad += (rowc[i] != 1) + (colc[i] != 1)
    return rowc, colc, bad


@numba.njit(cache=True)
def _lex_less(x, y, p):
    """True when feasible state x decodes to a lexicographically smaller order than y."""
    for k in range(p):
        a = -1
        b = -1
        for i in range(p):
            if x[i * p + k] != 0.0:
                a = i
            if y[i * p + k] != 0.0:
                b = i
        if a != b:
            return a < b
    return False


@numba.njit(cache=True)
def _better_feasible(e, x, feas_e, feas_x, p):
    if e < feas_e - 1e-9:
        return True
    return e <= feas_e + 1e-9 and _lex_less(x, feas_x, p)


@numba.njit(cache=True)
def anneal(lin, S, p, starts, t_hi, alpha, sweeps, seed):
    """Metropolis single-flip annealing, sequential scan, one run per start row.

    Returns (best_x, best_e, best_feasible_x, best_feasible_e, evaluations);
    best_feasible_e is +inf when no permutation state was visited.
    """
    np.random.seed(seed)
    n = lin.size
    best_x = starts[0].copy()
    best_e = np.inf
    feas_x = starts[0].copy()
    feas_e = np.inf
    evals = 0
    for r in range(starts.shape[0]):
        x = starts[r].copy()
        field = lin + S @ x
        e = _energy(lin, S, x)
        rowc, colc, bad = _counts(x, p)
        if e < best_e:
            best_e = e
            best_x[:] = x
        if bad == 0 and _better_feasible(e, x, feas_e, feas_x, p):
            feas_e = e
            feas_x[:] = x
        t = t_hi
        for _ in range(sweeps):
            for i in range(n):
                de = (1.0 - 2.0 * x[i]) * field[i]
                evals += 1
                if de <= 0.0 or np.random.random() < np.exp(-de / t):
                    bad += _flip(S, x, field, i, rowc, colc, p)
                    e += de
                    if e < best_e - 1e-12:
                        best_e = e
                        best_x[:] = x
                    if bad == 0 and _better_feasible(e, x, feas_e, feas_x, p):
                        feas_e = e
                        feas_x[:] = x
            t *= alpha
    return best_x, best_e, feas_x, feas_e, evals


@numba.njit(cache=True)
def hill_climb(lin, S, p, x0, budget, seed):
    """Steepest-descent single-flip search with random restarts.

    The first descent starts from x0; later ones from uniform random bits.
    """
    np.random.seed(seed)
    n = lin.size
    best_x = x0.copy()
    best_e = np.inf
    feas_x = x0.copy()
    feas_e = np.inf
    evals = 0
    x = x0.copy()
    first = True
    while first or evals + n <= budget:
        if not first:
            for i in range(n):
                x[i] = 1.0 if np.random.random() < 0.5 else 0.0
        first = False
        field = lin + S @ x
        e = _energy(lin, S, x)
        rowc, colc, bad = _counts(x, p)
        while evals + n <= budget:
            arg = -1
            low = 0.0
            for i in range(n):
                de = (1.0 - 2.0 * x[i]) * field[i]
                if de < low - 1e-12:
                    low = de
                    arg = i
            evals += n
            if arg < 0:
                break
            bad += _flip(S, x, field, arg, rowc, colc, p)
            e += low
        if e < best_e - 1e-12:
            best_e = e
            best_x[:] = x
        if bad == 0 and _better_feasible(e, x, feas_e, feas_x, p):
            feas_e = e
            feas_x[:] = x
    return best_x, best_e, feas_x, feas_e, evals


@numba.njit(cache=True)
def projected_descent(lin, S, x0, step, iters, use_adam, beta1, beta2, eps):
    """Box-projected gradient descent (plain or Adam) on lin.x + x.U.x.

    Returns (x, iterations_run).
    """
    n = lin.size
    x = x0.copy()
    m = np.zeros(n)
    v = np.zeros(n)
    b1t = 1.0
    b2t = 1.0
    it = 0
    for it in range(1, iters + 1):
        g = lin + S @ x
        moved = 0.0
        if use_adam:
            b1t *= beta1
            b2t *= beta2
        for i in range(n):
            if use_adam:
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
                upd = step * (m[i] / (1.0 - b1t)) / (np.sqrt(v[i] / (1.0 - b2t)) + eps)
            else:
                upd = step * g[i]
            xi = min(1.0, max(0.0, x[i] - upd))
            moved = max(moved, abs(xi - x[i]))
            x[i] = xi
        if moved < 1e-12:
            break
    return x, it


# -- kinematics -------------------------------------------------------------------

RED = 0
GREEN_GRANTED = 1  # only vehicles flagged as granted may cross
GREEN_ALL = 2
YELLOW = 3  # vehicles unable to stop comfortably carry on


@numba.njit(cache=True)
def _safe_speed(dist, lead_speed, dec, dt):
    # largest v with v*dt + v^2/(2 dec) <= dist + lead_speed^2/(2 dec)
    a = dec * dt
    return -a + np.sqrt(a * a + 2.0 * dec * max(dist, 0.0) + lead_speed * lead_speed)


@numba.njit(cache=True)
def advance(
    t, dt, lane_lo, lane_hi, head, nxt, arrival, pos, speed, stopped, exit_t,
    status, granted, signal, vmax, acc, dec, length, gap, box, approach, stop_speed,
):
    """Advance every lane by one step.

    status: 0 not yet arrived, 1 waiting to enter, 2 on the road, 3 exited.
    Returns the number of granted vehicles that left the intersection box.
    """
    spacing = length + gap
    granted_out = 0
    for lane in range(lane_lo.size):
        # arrivals join the entry queue, the first of them enters if there is room
        j = nxt[lane]
        while j < lane_hi[lane] and status[j] == 1:
            j += 1
        while j < lane_hi[lane] and status[j] == 0 and arrival[j] <= t + 1e-9:
            status[j] = 1
            j += 1
        j = nxt[lane]
        if j < lane_hi[lane] and status[j] == 1:
            room = True
            v0 = vmax
            if nxt[lane] > head[lane]:
                last = nxt[lane] - 1
                g = approach - pos[last] - spacing
                if g < 0.0:
                    room = False
                else:
                    v0 = min(vmax, _safe_speed(g, speed[last], dec, dt), g / dt)
            if room:
                status[j] = 2
                pos[j] = approach
                speed[j] = v0
                nxt[lane] += 1

        sig = signal[lane]
        for i in range(head[lane], nxt[lane]):
            if status[i] != 2:
                continue
            x = pos[i]
            v = speed[i]
            vn = min(v + acc * dt, vmax)
            if x >= 0.0:
                go = sig == GREEN_ALL or (sig == GREEN_GRANTED and granted[i])
                if sig == YELLOW and v * v / (2.0 * dec) > x:
                    go = True
                if not go:
                    vn = min(vn, _safe_speed(x, 0.0, dec, dt), x / dt)
            if i > head[lane]:
                g = x - pos[i - 1] - spacing
                if g < 0.0:
                    g = 0.0
                # leader already moved this step, so g / dt keeps the spacing intact
                vn = min(vn, _safe_speed(g, speed[i - 1], dec, dt), g / dt)
            if vn < 0.0:
                vn = 0.0
            pos[i] = x - vn * dt
            speed[i] = vn
            if vn < stop_speed:
                stopped[i] += dt
            if pos[i] <= -box:
                status[i] = 3
                exit_t[i] = t + dt
                if granted[i]:
                    granted_out += 1
        while head[lane] < nxt[lane] and status[head[lane]] == 3:
            head[lane] += 1
        # vehicles still queued outside the network are standing still
        j = nxt[lane]
        while j < lane_hi[lane] and status[j] == 1:
            stopped[j] += dt
            j += 1
    return granted_out


@numba.njit(cache=True)
def audit(t, lane_lo, lane_hi, head, nxt, arrival, pos, status, spacing):
    """(arrived, waiting, on_road, exited, overlaps) for the conservation checks."""
    arrived = 0
    waiting = 0
    on_road = 0
    exited = 0
    overlaps = 0
    for i in range(arrival.size):
        if arrival[i] <= t + 1e-9:
            arrived += 1
        s = status[i]
        if s == 1:
            waiting += 1
        elif s == 2:
            on_road += 1
        elif s == 3:
            exited += 1
    for lane in range(lane_lo.size):
        for i in range(head[lane] + 1, nxt[lane]):
            if status[i] == 2 and status[i - 1] == 2:
                if pos[i] - pos[i - 1] < spacing - 1e-6:
                    overlaps += 1
    return arrived, waiting, on_road, exited, overlaps
