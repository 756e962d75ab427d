"""Command-line entry point: ``gncflow <command> [--config F] [--out D] [--seed N] [--threads N]``.

Exit status is 0 on success, 2 for configuration errors and 3 for numerical
failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import TOY_LAMBDA_CONST, Config, ConfigError, load
from .objective import ToyMinimizerError, evaluate
from .optimizers import gnc_flow, gradient_descent, gradient_like

log = logging.getLogger("gncflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class NumericFailure(RuntimeError):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_census(census, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_a", "x_b", "f", "grad_f_norm", "is_global"])
        for k, (x, v, g) in enumerate(zip(census.points, census.values, census.grad_norms)):
            w.writerow([repr(float(x[0])), repr(float(x[1])), repr(float(v)), repr(float(g)), int(k == 0)])


def cmd_census(cfg: Config, args) -> int:
    from .experiments.basin import stationary_census

    p = cfg.problem()
    census = stationary_census(p, grid_res=cfg.census_grid_res())
    _write_census(census, _out_dir(args) / "census.csv")
    for x, v in zip(census.points, census.values):
        print(f"stationary point ({x[0]:+.6f}, {x[1]:+.6f})  f = {v:.6f}")
    return EXIT_OK


def cmd_basin(cfg: Config, args) -> int:
    from .experiments.basin import basin_sweep, stationary_census

    p = cfg.problem()
    bcfg = replace(cfg.basin(), threads=args.threads)
    census = stationary_census(p, grid_res=cfg.census_grid_res())
    result = basin_sweep(bcfg, p, census)
    out = _out_dir(args)
    result.write(out)
    _write_census(census, out / "census.csv")
    for tm, g, s in zip(result.t_max, result.rate_global[:, -1], result.rate_stationary[:, -1]):
        print(f"t_max {tm:10.4g}  rate_global {g:.4f}  rate_stationary {s:.4f}")
    return EXIT_OK


def cmd_recon(cfg: Config, args) -> int:
    from .experiments.recon import run_recon, write_recon

    rcfg = cfg.recon()
    result = run_recon(rcfg, seed=args.seed)
    write_recon(result, rcfg, _out_dir(args))
    for row in result.summary:
        print(f"{row['algorithm']:18s} {row['metric']:5s} mean {row['mean']:.4f}  std {row['std']:.4f}")
    if any(not np.isfinite(r["psnr"]) and r["psnr"] != np.inf for r in result.rows):
        raise NumericFailure("some reconstructions diverged")
    return EXIT_OK


def cmd_trace_demo(cfg: Config, args) -> int:
    """One trajectory per algorithm from a single initial point, traced per iteration."""
    p = cfg.problem()
    if p.dim != 2 and not (cfg.has("trace", "x1_a") or cfg.has("trace", "x1_b")):
        x1 = np.random.default_rng(args.seed).uniform(0.0, 1.0, p.dim)
    else:
        x1 = np.array([cfg.float("trace", "x1_a", -8.0), cfg.float("trace", "x1_b", -8.0)])
    algos = cfg.str("trace", "algorithm", "gradient_like,gnc_flow,gradient_descent")
    params = cfg.optimizer()
    out = _out_dir(args)
    for algo in (a.strip() for a in algos.split(",")):
        if algo == "gradient_like":
            grid = cfg.grid(p.t_min, p.t_max, params.max_iters, "linear")
            tr = gradient_like(p, x1, grid, params)
        elif algo == "gnc_flow":
            gparams = params if cfg.has("optimizer", "lambda_policy") else replace(
                params, lambda_policy="constant", lambda_const=cfg.float("optimizer", "lambda_const", TOY_LAMBDA_CONST))
            grid = cfg.grid(p.t_min, p.t_max, params.max_iters, "linear")
            tr = gnc_flow(p, x1, grid, gparams)
        elif algo == "gradient_descent":
            tr = gradient_descent(p, x1, params)
        else:
            raise ConfigError(f"[trace] unknown algorithm {algo!r}")
        tr.to_csv(out / f"trace_{algo}.csv")
        last = tr.records[-1] if tr.records else None
        final = ", ".join(f"{v:+.6g}" for v in tr.x[:4])
        print(f"{algo:18s} iterations {len(tr):5d}  reason {tr.reason:9s}  x_final ({final}{', ...' if p.dim > 4 else ''})"
              + (f"  f {last.f:.6g}" if last is not None else ""))
        if tr.reason == "failed" or not np.all(np.isfinite(tr.x)):
            raise NumericFailure(f"{algo} produced a non-finite iterate")
    return EXIT_OK


def cmd_gradcheck(cfg: Config, args) -> int:
    """Central finite differences of F(., t) at random (x, t) pairs."""
    p = cfg.problem()
    rng = np.random.default_rng(args.seed)
    n_points = 200 if p.dim <= 16 else 5
    worst = 0.0
    for _ in range(n_points):
        x = rng.uniform(-10.0, 10.0, p.dim) if p.dim <= 16 else rng.uniform(0.0, 1.0, p.dim)
        t = float(np.exp(rng.uniform(np.log(p.t_min), np.log(p.t_max))))
        g = evaluate(p, x, t, need_value=False).grad
        fd = finite_difference_grad(p, x, t)
        err = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, err)
    print(f"gradcheck: {n_points} points, max relative error {worst:.3e}")
    if not worst < 1e-5:
        raise NumericFailure(f"gradient check failed: relative error {worst:.3e}")
    return EXIT_OK


def finite_difference_grad(p, x, t) -> np.ndarray:
    """Central differences with a step scaled to |x_i|; all 2n points in one batch."""
    n = x.size
    h = 1e-5 * np.maximum(1.0, np.abs(x))
    E = np.diag(h)
    pts = np.concatenate([x + E, x - E])
    vals = evaluate(p, pts, t, need_grad=False).value
    return (vals[:n] - vals[n:]) / (2 * h)


COMMANDS = {
    "basin": cmd_basin,
    "recon": cmd_recon,
    "trace-demo": cmd_trace_demo,
    "gradcheck": cmd_gradcheck,
    "census": cmd_census,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI configuration file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: ./out)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="64-bit run seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="gncflow", parents=[common],
                                     description="Graduated non-convexity experiments with smoothed mixture priors.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "basin": "convergence-basin sweep on the 2-D problem",
        "recon": "CT reconstructions with PSNR/SSIM tables",
        "trace-demo": "per-iteration diagnostics for single trajectories",
        "gradcheck": "finite-difference check of the objective gradient",
        "census": "stationary points of the 2-D objective",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    defaults = {"config": None, "out": "out", "seed": 0, "threads": 1, "verbose": False}
    for key, value in defaults.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed < 0 or args.seed >= 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericFailure, ToyMinimizerError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
