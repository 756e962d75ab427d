"""Convergence-basin study on two-dimensional problems.

Every (initial point, t_max) pair is one trajectory; trajectories for a given
t_max run together as a batch and are labelled at checkpoint iterations as
converging to the global minimiser, to another stationary point, or neither.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import root

from ..objective import InverseProblem, eval_f, grad_f
from ..optimizers import OptimizerParams, gnc_flow_batch, gradient_descent_batch, gradient_like_batch
from ..schedules import make_grid

GLOBAL, STATIONARY, NONSTATIONARY = "global", "stationary_nonglobal", "nonstationary"
LABELS = (GLOBAL, STATIONARY, NONSTATIONARY)
ALGORITHMS = ("gnc_flow", "gradient_like")


@dataclass
class StationaryCensus:
    points: np.ndarray  # (S, 2) stationary points, sorted by f
    values: np.ndarray  # f at each point
    grad_norms: np.ndarray
    tol: float

    @property
    def x_star(self) -> np.ndarray:
        return self.points[0]


def _grid_points(lo, hi, res):
    g = np.linspace(lo, hi, res)
    a, b = np.meshgrid(g, g, indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def stationary_census(p: InverseProblem, grid_res: int = 40, bounds=(-10.0, 10.0), cluster_radius: float = 1e-2,
                      tol: float = 1e-6, descent_iters: int = 3000) -> StationaryCensus:
    """Stationary points of f reached by local descent from a dense grid of seeds."""
    if p.dim != 2:
        raise ValueError("the stationary-point census is defined for two-dimensional problems")
    seeds = _grid_points(bounds[0], bounds[1], grid_res)
    params = OptimizerParams(max_iters=descent_iters, eps=tol * 1e-2, lambda_policy="armijo_bb")
    ends = gradient_descent_batch(p, seeds, params).x
    ends = ends[np.all(np.isfinite(ends), axis=1)]

    reps = []
    for x in ends:
        if not any(np.linalg.norm(x - r) < cluster_radius for r in reps):
            reps.append(x)
    points = []
    for x in reps:
        sol = root(lambda z: grad_f(p, z), x, tol=1e-14)
        z = sol.x if sol.success and np.linalg.norm(sol.x - x) < cluster_radius else x
        if np.linalg.norm(grad_f(p, z)) < tol and not any(np.linalg.norm(z - q) < cluster_radius for q in points):
            points.append(z)
    if not points:
        raise RuntimeError("census found no stationary point; increase grid_res or descent_iters")
    points = np.array(points)
    values = np.array([eval_f(p, z) for z in points])
    order = np.argsort(values, kind="stable")
    points, values = points[order], values[order]
    norms = np.linalg.norm(grad_f(p, points), axis=1)
    return StationaryCensus(points, values, norms, tol)


def classify(x_final, p: InverseProblem, census: StationaryCensus, tol_x: float = 0.1, tol_g: float = 1e-4):
    """Label one point (n,) or a batch (B, n)."""
    X = np.array(x_final, dtype=float, ndmin=2)
    labels = np.full(X.shape[0], NONSTATIONARY, dtype=object)
    finite = np.all(np.isfinite(X), axis=1)
    if finite.any():
        Xf = X[finite]
        near = np.linalg.norm(Xf - census.x_star, axis=1) < tol_x
        gnorm = np.linalg.norm(grad_f(p, Xf), axis=1)
        lab = np.where(near, GLOBAL, np.where(gnorm < tol_g, STATIONARY, NONSTATIONARY))
        labels[finite] = lab
    labels = labels.astype(str)
    return str(labels[0]) if np.ndim(x_final) == 1 else labels


@dataclass
class BasinConfig:
    bounds: tuple[float, float] = (-10.0, 10.0)
    resolution: int = 100
    t_max_count: int = 20
    t_max_bounds: tuple[float, float] = (1e-2, 10.0)
    iterations: int = 1300
    grid_spacing: str = "linear"
    algorithm: str = "gradient_like"
    tol_x: float = 0.1
    tol_g: float = 1e-4
    checkpoint_every: int = 10
    threads: int = 1
    params: OptimizerParams = field(default_factory=OptimizerParams)

    def __post_init__(self):
        lo, hi = self.bounds
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise ValueError(f"invalid initial-point bounds {self.bounds}")
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2 per axis")
        if self.t_max_count < 1 or not 0 < self.t_max_bounds[0] <= self.t_max_bounds[1]:
            raise ValueError("invalid t_max sweep")
        if self.iterations < 2:
            raise ValueError("need at least 2 iterations")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}, expected one of {ALGORITHMS}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")

    def t_max_values(self) -> np.ndarray:
        lo, hi = self.t_max_bounds
        if self.t_max_count == 1:
            return np.array([hi])
        return np.geomspace(lo, hi, self.t_max_count)

    def initial_points(self) -> np.ndarray:
        return _grid_points(self.bounds[0], self.bounds[1], self.resolution)


@dataclass
class BasinResult:
    t_max: np.ndarray  # (T,)
    checkpoints: np.ndarray  # (C,) iteration counts
    rate_global: np.ndarray  # (T, C)
    rate_stationary: np.ndarray  # (T, C)
    initial_points: np.ndarray  # (N, 2)
    labels: np.ndarray  # (T, N) final labels
    flagged: np.ndarray  # (T,) trajectories with any flagged step or failure
    max_descent_inner: np.ndarray  # (T,) largest <grad f, d> over all steps
    t_increases: np.ndarray  # (T,) total number of increases of the selected time
    metadata: dict

    def write(self, out_dir) -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "basin_rates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_max", "iter", "rate_global", "rate_stationary"])
            for a, tm in enumerate(self.t_max):
                for c, it in enumerate(self.checkpoints):
                    w.writerow([repr(float(tm)), int(it), repr(float(self.rate_global[a, c])),
                                repr(float(self.rate_stationary[a, c]))])
        with open(out / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1_a", "x1_b", "t_max", "label"])
            for a, tm in enumerate(self.t_max):
                for k, x in enumerate(self.initial_points):
                    w.writerow([repr(float(x[0])), repr(float(x[1])), repr(float(tm)), self.labels[a, k]])
        (out / "basin_meta.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")


def _checkpoints(iterations, every):
    steps = iterations if iterations >= 1 else 0
    cps = list(range(0, steps + 1, every))
    if cps[-1] != steps:
        cps.append(steps)
    return np.array(cps)


def _run_cell(cfg: BasinConfig, p: InverseProblem, census, X1, t_max, cps):
    pt = p.with_t_max(t_max)
    grid = make_grid(pt.t_min, t_max, cfg.iterations, cfg.grid_spacing)
    cp_index = {int(c): j for j, c in enumerate(cps)}
    rates = np.full((2, len(cps)), np.nan)

    def note(k, X, failed):
        lab = classify(X, pt, census, cfg.tol_x, cfg.tol_g)
        lab = np.where(failed, NONSTATIONARY, lab)
        g = np.mean(lab == GLOBAL)
        rates[:, cp_index[k]] = g, g + np.mean(lab == STATIONARY)
        return lab

    note(0, X1, ~np.all(np.isfinite(X1), axis=1))

    def callback(i, eng):
        if i in cp_index:
            note(i, eng.X, eng.reason == "failed")

    if cfg.algorithm == "gnc_flow":
        res = gnc_flow_batch(pt, X1, grid, cfg.params, callback=callback)
    else:
        res = gradient_like_batch(pt, X1, grid, cfg.params, callback=callback)
    final = note(int(cps[-1]), res.x, res.reason == "failed")
    # checkpoints after every run stopped carry the final state
    missing = np.isnan(rates[0])
    rates[:, missing] = rates[:, [-1]]
    flagged = int(np.sum((res.flags > 0) | (res.reason == "failed")))
    return rates, final, flagged, float(np.max(res.max_descent_inner)), int(res.t_increases.sum())


def basin_sweep(cfg: BasinConfig, p: InverseProblem, census: StationaryCensus | None = None,
                metadata: dict | None = None) -> BasinResult:
    if p.dim != 2:
        raise ValueError("basin sweeps are defined for two-dimensional problems")
    census = census if census is not None else stationary_census(p)
    X1 = cfg.initial_points()
    tms = cfg.t_max_values()
    if tms.max() > p.schedule.t_max * (1 + 1e-12):
        raise ValueError("t_max sweep exceeds the schedule's domain")
    cps = _checkpoints(cfg.iterations if cfg.algorithm == "gradient_like" else cfg.iterations - 1,
                       cfg.checkpoint_every)

    def work(a):
        return _run_cell(cfg, p, census, X1, tms[a], cps)

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        cells = list(pool.map(work, range(len(tms))))

    meta = {
        "algorithm": cfg.algorithm,
        "iterations": cfg.iterations,
        "grid_spacing": cfg.grid_spacing,
        "resolution": cfg.resolution,
        "bounds": list(cfg.bounds),
        "t_max_bounds": list(cfg.t_max_bounds),
        "t_max_count": cfg.t_max_count,
        "tol_x": cfg.tol_x,
        "tol_g": cfg.tol_g,
        "optimizer": asdict(cfg.params),
        "alpha": p.alpha,
        "alpha_rule": p.alpha_rule,
        "schedule": asdict(p.schedule),
        "t_min": p.t_min,
        "x_star": census.x_star.tolist(),
        "census_points": census.points.tolist(),
    }
    meta.update(metadata or {})
    return BasinResult(
        t_max=tms,
        checkpoints=cps,
        rate_global=np.array([c[0][0] for c in cells]),
        rate_stationary=np.array([c[0][1] for c in cells]),
        initial_points=X1,
        labels=np.array([c[1] for c in cells]),
        flagged=np.array([c[2] for c in cells]),
        max_descent_inner=np.array([c[3] for c in cells]),
        t_increases=np.array([c[4] for c in cells]),
        metadata=meta,
    )
