"""Graduated non-convexity flow, gradient-like method with adaptive smoothing, gradient descent.

Every method runs on a batch of independent trajectories (rows of a (B, n)
array); the single-trajectory entry points are thin wrappers returning a
:class:`RunTrace`.  Rows never interact, so a row's iterates do not depend on
what else is in the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .objective import EvalCounter, InverseProblem, evaluate
from .schedules import TimeGrid

LAMBDA_POLICIES = ("constant", "armijo", "armijo_bb")

FLAG_LINESEARCH_FAILED = 1  # Armijo exhausted its backtracks, lambda_min taken
FLAG_NOT_DESCENT = 2  # <grad f, d> >= 0 under an Armijo policy, lambda_min taken
FLAG_NONFINITE = 4


@dataclass(frozen=True)
class OptimizerParams:
    max_iters: int = 1300
    c: float = 1e-4
    beta: float = 0.5
    eps: float = 1e-6
    lambda_policy: str = "armijo_bb"
    lambda_const: float = 1.0
    lambda_init: float = 1.0
    lambda_min: float = 1e-12
    lambda_max: float = 1e3
    max_backtracks: int = 60

    def __post_init__(self):
        if not 0 < self.c < 1:
            raise ValueError(f"Armijo constant c must lie in (0, 1), got {self.c}")
        if not 0 < self.beta < 1:
            raise ValueError(f"backtracking factor beta must lie in (0, 1), got {self.beta}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.lambda_const > 0 or not self.lambda_init > 0:
            raise ValueError("step sizes must be positive")
        if not 0 < self.lambda_min <= self.lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda_max")
        if self.lambda_policy not in LAMBDA_POLICIES:
            raise ValueError(f"unknown lambda policy {self.lambda_policy!r}, expected one of {LAMBDA_POLICIES}")
        if self.max_iters < 0 or self.max_backtracks < 0:
            raise ValueError("iteration limits must be non-negative")


# -- step size rules ----------------------------------------------------------


def armijo_search(phi, f0, slope, c=1e-4, beta=0.5, lam0=1.0, max_backtracks=60, lam_min=1e-12):
    """Backtracking on ``phi(lam) = f(x + lam d)``.

    Returns ``(lam, n_backtracks, accepted)``.  The accepted step is the
    largest ``lam0 * beta**l`` with ``phi(lam) <= f0 + c lam slope``; when no
    trial passes, ``lam_min`` is returned with ``accepted=False``.
    """
    if not slope < 0:
        raise ValueError(f"Armijo search needs a descent direction, got slope {slope}")
    if not (0 < c < 1 and 0 < beta < 1 and lam0 > 0):
        raise ValueError("need c, beta in (0, 1) and lam0 > 0")
    lam = lam0
    for ell in range(max_backtracks + 1):
        if phi(lam) <= f0 + c * lam * slope:
            return lam, ell, True
        lam *= beta
    return lam_min, max_backtracks, False


def armijo_backtrack(phi, f0, slope, c=1e-4, beta=0.5, lam0=1.0, max_backtracks=60, lam_min=1e-12):
    return armijo_search(phi, f0, slope, c, beta, lam0, max_backtracks, lam_min)[0]


def bb_candidate(s, z, lam_floor=1e-12, lam_ceil=1e3):
    """Barzilai-Borwein step <s, s> / <s, z>, clamped; ``lam_ceil`` on non-positive curvature.

    ``s`` and ``z`` may be single vectors or (B, n) batches.
    """
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    ss = np.einsum("...n,...n->...", s, s)
    sz = np.einsum("...n,...n->...", s, z)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(sz > 0, ss / np.where(sz > 0, sz, 1.0), lam_ceil)
    lam = np.clip(lam, lam_floor, lam_ceil)
    return float(lam) if lam.ndim == 0 else lam


# -- traces -----------------------------------------------------------------

TRACE_COLUMNS = ("iter", "t", "lambda", "f", "F", "grad_f_norm", "descent_inner", "flags")


@dataclass
class IterRecord:
    iter: int
    t: float
    lam: float
    f: float
    F: float
    grad_f_norm: float
    descent_inner: float
    flags: int = 0


@dataclass
class RunTrace:
    records: list[IterRecord]
    x: np.ndarray
    reason: str
    xs: list[np.ndarray] = field(default_factory=list)
    counts: EvalCounter = field(default_factory=EvalCounter)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        attr = "lam" if name == "lambda" else name
        return np.array([getattr(r, attr) for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([r.iter, repr(r.t), repr(r.lam), repr(r.f), repr(r.F),
                            repr(r.grad_f_norm), repr(r.descent_inner), r.flags])


@dataclass
class BatchResult:
    """Outcome of a batched run; per-row summaries plus optional per-iteration history."""

    x: np.ndarray
    iterations: np.ndarray
    reason: np.ndarray
    flags: np.ndarray
    max_descent_inner: np.ndarray
    t_increases: np.ndarray
    t_last: np.ndarray
    counts: EvalCounter
    history: list[dict] | None = None

    def trace(self, row: int = 0, keep_x: bool = True) -> RunTrace:
        records, xs = [], []
        for h in self.history or []:
            if not h["active"][row]:
                continue
            records.append(IterRecord(
                int(h["iter"]), float(h["t"][row]), float(h["lam"][row]), float(h["f"][row]),
                float(h["F"][row]), float(h["grad_f_norm"][row]), float(h["descent_inner"][row]),
                int(h["flags"][row])))
            if keep_x:
                xs.append(h["x"][row].copy())
        if keep_x:
            xs.append(self.x[row].copy())
        return RunTrace(records, self.x[row].copy(), str(self.reason[row]), xs, self.counts)


# -- batched engine -------------------------------------------------------------


class _Engine:
    """Shared state for batched runs: objective evaluations, line search, bookkeeping."""

    def __init__(self, p: InverseProblem, X1, params: OptimizerParams, record: bool, callback):
        X = np.array(X1, dtype=float, ndmin=2)
        if X.shape[1] != p.dim:
            raise ValueError(f"initial points have dimension {X.shape[1]}, problem has {p.dim}")
        self.p = p
        self.params = params
        self.X = X
        B = X.shape[0]
        self.B = B
        self.active = np.all(np.isfinite(X), axis=1)
        self.reason = np.where(self.active, "max_iter", "failed").astype(object)
        self.iterations = np.zeros(B, dtype=int)
        self.flags = np.zeros(B, dtype=int)
        self.max_inner = np.full(B, -np.inf)
        self.t_increases = np.zeros(B, dtype=int)
        self.t_last = np.full(B, np.nan)
        self.counts = EvalCounter()
        self.history = [] if record else None
        self.callback = callback
        # line-search memory for Barzilai-Borwein seeding
        self.prev_x = np.full_like(X, np.nan)
        self.prev_g = np.full_like(X, np.nan)

    # non-finite results are detected per row and end that row, so no warnings
    def f_value(self, X):
        with np.errstate(all="ignore"):
            return evaluate(self.p, X, self.p.t_min, need_grad=False, counter=self.counts).value

    def f_and_grad(self, X):
        with np.errstate(all="ignore"):
            ev = evaluate(self.p, X, self.p.t_min, counter=self.counts)
        return ev.value, ev.grad

    def F_grad(self, X, t):
        with np.errstate(all="ignore"):
            return evaluate(self.p, X, t, need_value=False, counter=self.counts).grad

    def F_value(self, X, t):
        with np.errstate(all="ignore"):
            return evaluate(self.p, X, t, need_grad=False, counter=self.counts).value

    def initial_steps(self, idx, X, G, t):
        """Trial step per row: constant, lambda_init, or BB scaled by the direction's time factor."""
        prm = self.params
        lam0 = np.full(len(idx), prm.lambda_init)
        if prm.lambda_policy == "armijo_bb":
            px, pg = self.prev_x[idx], self.prev_g[idx]
            have = np.all(np.isfinite(px), axis=1)
            if np.any(have):
                bb = bb_candidate(X[have] - px[have], G[have] - pg[have], prm.lambda_min, prm.lambda_max)
                lam0[have] = np.clip(bb / t[have], prm.lambda_min, prm.lambda_max)
            self.prev_x[idx] = X
            self.prev_g[idx] = G
        return lam0

    def line_search(self, idx, X, G, D, f0, slope, t):
        """Batched step-size selection; returns (lam, f_new or nan, flags).

        ``G`` is grad f at ``X`` (used for Barzilai-Borwein memory).
        """
        prm = self.params
        n = len(idx)
        flags = np.zeros(n, dtype=int)
        f_new = np.full(n, np.nan)
        if prm.lambda_policy == "constant":
            return np.full(n, prm.lambda_const), f_new, flags

        lam = self.initial_steps(idx, X, G, t)
        descent = slope < 0
        flags[~descent] |= FLAG_NOT_DESCENT
        lam[~descent] = prm.lambda_min
        pending = np.flatnonzero(descent)
        for _ in range(prm.max_backtracks + 1):
            if pending.size == 0:
                break
            trial = X[pending] + lam[pending, None] * D[pending]
            ft = self.f_value(trial)
            ok = ft <= f0[pending] + prm.c * lam[pending] * slope[pending]
            f_new[pending[ok]] = ft[ok]
            pending = pending[~ok]
            lam[pending] *= prm.beta
        if pending.size:
            lam[pending] = prm.lambda_min
            flags[pending] |= FLAG_LINESEARCH_FAILED
        return lam, f_new, flags

    def step(self, i, idx, t, D, lam, f_cur, G, F_cur, slope, flags):
        """Apply x += lam d on rows ``idx`` and do all per-iteration bookkeeping."""
        X_old = self.X[idx]
        with np.errstate(all="ignore"):
            X_new = X_old + lam[:, None] * D
        bad = ~np.all(np.isfinite(X_new), axis=1)
        flags = flags | np.where(bad, FLAG_NONFINITE, 0)
        self.flags[idx] += (flags != 0)
        self.max_inner[idx] = np.fmax(self.max_inner[idx], slope)
        prev_t = self.t_last[idx]
        self.t_increases[idx] += (np.isfinite(prev_t) & (t > prev_t))
        self.t_last[idx] = t
        self.iterations[idx] += 1
        if self.history is not None:
            self._record(i, idx, t, lam, f_cur, G, F_cur, slope, flags, X_old)
        good = idx[~bad]
        self.X[good] = X_new[~bad]
        if bad.any():
            self.fail(idx[bad])

    def fail(self, rows):
        self.active[rows] = False
        self.reason[rows] = "failed"

    def _record(self, i, idx, t, lam, f_cur, G, F_cur, slope, flags, X_old):
        B = self.B
        h = {"iter": i, "active": np.zeros(B, dtype=bool), "x": np.full((B, self.p.dim), np.nan)}
        for key in ("t", "lam", "f", "F", "grad_f_norm", "descent_inner"):
            h[key] = np.full(B, np.nan)
        h["flags"] = np.zeros(B, dtype=int)
        h["active"][idx] = True
        h["x"][idx] = X_old
        h["t"][idx] = t
        h["lam"][idx] = lam
        h["f"][idx] = f_cur
        h["F"][idx] = F_cur
        with np.errstate(all="ignore"):
            h["grad_f_norm"][idx] = np.linalg.norm(G, axis=1)
        h["descent_inner"][idx] = slope
        h["flags"][idx] = flags
        self.history.append(h)

    def finish(self) -> BatchResult:
        return BatchResult(self.X, self.iterations, self.reason.astype(str), self.flags,
                           self.max_inner, self.t_increases, self.t_last, self.counts, self.history)


def _grid_values(grid) -> np.ndarray:
    values = np.asarray(grid.values if isinstance(grid, TimeGrid) else grid, dtype=float)
    if values.ndim != 1 or values.size < 2 or np.any(np.diff(values) >= 0):
        raise ValueError("time grid must be a strictly decreasing sequence of at least two values")
    return values


def _check_finite_rows(eng, idx, *arrays):
    ok = np.ones(len(idx), dtype=bool)
    for a in arrays:
        a = np.asarray(a)
        ok &= np.all(np.isfinite(a.reshape(len(idx), -1)), axis=1)
    if not ok.all():
        eng.fail(idx[~ok])
    return ok


def gnc_flow_batch(p: InverseProblem, X1, grid, params: OptimizerParams, record=False, callback=None) -> BatchResult:
    """Graduated non-convexity flow: x <- x + lam_i d_i with d_i = -t_i grad_x F(x_i, t_i).

    One step per grid value except the last, so a grid of I values gives I - 1
    steps.  ``params.max_iters`` is not used; the grid sets the length.
    """
    ts = _grid_values(grid)
    p.check_time(ts)
    eng = _Engine(p, X1, params, record, callback)
    armijo = params.lambda_policy != "constant"
    for i, t_i in enumerate(ts[:-1], start=1):
        idx = np.flatnonzero(eng.active)
        if idx.size == 0:
            break
        X = eng.X[idx]
        t = np.full(idx.size, t_i)
        need_f = armijo or record
        if need_f:
            f_cur, G = eng.f_and_grad(X)
        else:
            f_cur, G = np.full(idx.size, np.nan), np.full_like(X, np.nan)
        D = -t_i * eng.F_grad(X, t_i)
        slope = np.einsum("bn,bn->b", G, D) if need_f else np.full(idx.size, np.nan)
        F_cur = eng.F_value(X, t_i) if record else np.full(idx.size, np.nan)
        ok = _check_finite_rows(eng, idx, D, *((f_cur,) if need_f else ()))
        idx, X, t, D, f_cur, G, slope, F_cur = (a[ok] for a in (idx, X, t, D, f_cur, G, slope, F_cur))
        lam, _, flags = eng.line_search(idx, X, G, D, f_cur, slope, t)
        eng.step(i, idx, t, D, lam, f_cur, G, F_cur, slope, flags)
        if callback is not None:
            callback(i, eng)
    return eng.finish()


def _select_smoothing_batch(eng, X, G, ts, j_prev):
    """First grid index j >= j_prev with <grad f, -t_j grad F(x, t_j)> < 0, per row.

    Returns ``(j, D, slope)``.  The last index is t_min, where the direction is
    -t_min grad f and the inner product is -t_min ||grad f||^2.
    """
    n_rows = X.shape[0]
    last = len(ts) - 1
    j_out = np.full(n_rows, last)
    D = -ts[last] * G
    slope = np.einsum("bn,bn->b", G, D)
    pending = np.flatnonzero(j_prev < last)
    cursor = j_prev.copy()
    width = 1
    while pending.size:
        # evaluate a window of candidate indices per pending row at once
        offs = np.arange(width)
        cand = cursor[pending, None] + offs[None, :]
        valid = cand < last
        rows = np.repeat(pending, width).reshape(-1, width)[valid]
        js = cand[valid]
        GF = eng.F_grad(X[rows], ts[js])
        Dc = -ts[js, None] * GF
        sc = np.einsum("bn,bn->b", G[rows], Dc)
        hit = np.zeros(cand.shape, dtype=bool)
        hit[valid] = sc < 0
        # position in the flattened candidate list of every valid entry
        pos = np.full(cand.shape, -1)
        pos[valid] = np.arange(js.size)
        found = hit.any(axis=1)
        first = np.argmax(hit, axis=1)
        rl = np.flatnonzero(found)
        k = pos[rl, first[rl]]
        r = pending[rl]
        j_out[r] = js[k]
        D[r] = Dc[k]
        slope[r] = sc[k]
        # rows whose window ran into t_min keep the terminal direction
        exhausted = ~found & ~valid.all(axis=1)
        keep = ~found & ~exhausted
        cursor[pending] += width
        pending = pending[keep]
        width = min(width * 4, 256)
    return j_out, D, slope


def select_smoothing(p: InverseProblem, x, gf, grid, t_prev):
    """Largest grid time t_j <= t_prev whose smoothed direction descends on f.

    Returns ``(t_j, d)`` with ``d = -t_j grad_x F(x, t_j)``.
    """
    ts = _grid_values(grid)
    gf = np.asarray(gf, dtype=float)
    if not np.linalg.norm(gf) > 0:
        raise ValueError("select_smoothing needs a non-stationary point (grad f != 0)")
    # first index with t_j <= t_prev
    j_prev = int(np.searchsorted(-ts, -t_prev * (1 + 1e-12), side="left"))
    j_prev = min(j_prev, len(ts) - 1)
    eng = _Engine(p, np.asarray(x, dtype=float)[None], OptimizerParams(), False, None)
    j, D, _ = _select_smoothing_batch(eng, eng.X, gf[None], ts, np.array([j_prev]))
    return float(ts[j[0]]), D[0]


def gradient_like_batch(p: InverseProblem, X1, grid, params: OptimizerParams, record=False, callback=None) -> BatchResult:
    """Gradient-like method with the adaptive smoothing schedule.

    Each iteration stops the row if ||grad f|| <= eps.  Otherwise it picks the
    largest grid time that is no larger than both the previously selected time
    and the scheduled time ``grid[i - 1]`` and whose smoothed direction
    descends on f, then takes an Armijo step on f (seeded by Barzilai-Borwein
    under ``armijo_bb``).  Past the end of the grid the schedule stays at t_min.
    """
    ts = _grid_values(grid)
    p.check_time(ts)
    if ts[-1] != p.t_min:
        raise ValueError("the smoothing grid must end at the problem's t_min")
    if params.lambda_policy == "constant":
        raise ValueError("the gradient-like method needs an Armijo step-size policy")
    eng = _Engine(p, X1, params, record, callback)
    j_prev = np.zeros(eng.B, dtype=int)
    for i in range(1, params.max_iters + 1):
        idx = np.flatnonzero(eng.active)
        if idx.size == 0:
            break
        X = eng.X[idx]
        f_cur, G = eng.f_and_grad(X)
        ok = _check_finite_rows(eng, idx, f_cur, G)
        idx, X, f_cur, G = idx[ok], X[ok], f_cur[ok], G[ok]
        gnorm = np.linalg.norm(G, axis=1)
        done = gnorm <= params.eps
        if done.any():
            eng.active[idx[done]] = False
            eng.reason[idx[done]] = "converged"
            idx, X, f_cur, G = idx[~done], X[~done], f_cur[~done], G[~done]
        if idx.size == 0:
            break
        # never above the scheduled time t_i, so the selected times reach t_min
        start = np.maximum(j_prev[idx], min(i - 1, len(ts) - 1))
        j, D, slope = _select_smoothing_batch(eng, X, G, ts, start)
        j_prev[idx] = j
        t = ts[j]
        F_cur = eng.F_value(X, t) if record else np.full(idx.size, np.nan)
        lam, _, flags = eng.line_search(idx, X, G, D, f_cur, slope, t)
        eng.step(i, idx, t, D, lam, f_cur, G, F_cur, slope, flags)
        if callback is not None:
            callback(i, eng)
    else:
        _mark_converged_at_end(eng, params)
    return eng.finish()


def gradient_descent_batch(p: InverseProblem, X1, params: OptimizerParams, record=False, callback=None) -> BatchResult:
    """Descent on f along -grad f with the configured step-size policy."""
    eng = _Engine(p, X1, params, record, callback)
    for i in range(1, params.max_iters + 1):
        idx = np.flatnonzero(eng.active)
        if idx.size == 0:
            break
        X = eng.X[idx]
        f_cur, G = eng.f_and_grad(X)
        ok = _check_finite_rows(eng, idx, f_cur, G)
        idx, X, f_cur, G = idx[ok], X[ok], f_cur[ok], G[ok]
        done = np.linalg.norm(G, axis=1) <= params.eps
        if done.any():
            eng.active[idx[done]] = False
            eng.reason[idx[done]] = "converged"
            idx, X, f_cur, G = idx[~done], X[~done], f_cur[~done], G[~done]
        if idx.size == 0:
            break
        t = np.full(idx.size, 1.0)
        D = -G
        slope = -np.einsum("bn,bn->b", G, G)
        lam, _, flags = eng.line_search(idx, X, G, D, f_cur, slope, t)
        eng.step(i, idx, np.full(idx.size, p.t_min), D, lam, f_cur, G, f_cur, slope, flags)
        if callback is not None:
            callback(i, eng)
    else:
        _mark_converged_at_end(eng, params)
    return eng.finish()


def _mark_converged_at_end(eng, params):
    """After the last allowed iteration, rows already eps-stationary count as converged."""
    idx = np.flatnonzero(eng.active)
    if idx.size == 0:
        return
    _, G = eng.f_and_grad(eng.X[idx])
    done = np.linalg.norm(G, axis=1) <= params.eps
    eng.reason[idx[done]] = "converged"


# -- single-trajectory API ------------------------------------------------------------


def gnc_flow(p: InverseProblem, x1, grid, params: OptimizerParams) -> RunTrace:
    return gnc_flow_batch(p, np.asarray(x1, dtype=float)[None], grid, params, record=True).trace(0)


def gradient_like(p: InverseProblem, x1, grid, params: OptimizerParams) -> RunTrace:
    return gradient_like_batch(p, np.asarray(x1, dtype=float)[None], grid, params, record=True).trace(0)


def gradient_descent(p: InverseProblem, x1, params: OptimizerParams) -> RunTrace:
    return gradient_descent_batch(p, np.asarray(x1, dtype=float)[None], params, record=True).trace(0)


def describe_flags(flags: int) -> str:
    names = []
    if flags & FLAG_LINESEARCH_FAILED:
        names.append("linesearch_failed")
    if flags & FLAG_NOT_DESCENT:
        names.append("not_descent")
    if flags & FLAG_NONFINITE:
        names.append("nonfinite")
    return "|".join(names)


__all__ = [
    "OptimizerParams", "RunTrace", "IterRecord", "BatchResult", "armijo_backtrack", "armijo_search",
    "bb_candidate", "select_smoothing", "gnc_flow", "gnc_flow_batch", "gradient_like",
    "gradient_like_batch", "gradient_descent", "gradient_descent_batch", "describe_flags",
]
