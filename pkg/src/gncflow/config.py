"""INI-style run configuration.

Sections and keys (all optional; unknown keys are rejected)::

    [schedule]   variant, sigma, beta_min, beta_max, t_min, t_max
    [grid]       count, spacing
    [optimizer]  algorithm, c, beta, eps, lambda_policy, lambda_const, lambda_init,
                 lambda_min, lambda_max, max_backtracks, max_iters
    [alpha]      value, rule
    [operator]   kind (toy | dense | radon), matrix, n_px, n_angles, n_det
    [problem]    measurements
    [prior]      kind (toy | mixture | empirical), weights, means, covariances,
                 variances, points, bandwidth
    [basin]      resolution, bounds_lo, bounds_hi, t_max_count, t_max_lo, t_max_hi,
                 iterations, grid_spacing, tol_x, tol_g, checkpoint_every,
                 census_grid_res, full_scale
    [recon]      n_px, n_angles, noise, n_train, prior, bandwidth, patch, stride,
                 n_components, n_images, n_seeds, init, iterations, algorithms,
                 gnc_iterations, gnc_lambda, grid_spacing, write_images, write_traces
    [trace]      x1_a, x1_b, algorithm

Array-valued prior keys are JSON (nested lists).  Relative paths resolve
against the config file's directory.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .objective import InverseProblem, verify_toy_minimizer
from .operators import DenseOperator, build_radon, load_matrix
from .optimizers import OptimizerParams
from .priors import GaussianMixture, empirical_prior, load_points_csv, toy_mixture
from .schedules import DiffusionSchedule, make_grid


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


SECTIONS = {
    "schedule": {"variant", "sigma", "beta_min", "beta_max", "t_min", "t_max"},
    "grid": {"count", "spacing"},
    "optimizer": {"algorithm", "c", "beta", "eps", "lambda_policy", "lambda_const", "lambda_init",
                  "lambda_min", "lambda_max", "max_backtracks", "max_iters"},
    "alpha": {"value", "rule"},
    "operator": {"kind", "matrix", "n_px", "n_angles", "n_det"},
    "problem": {"measurements"},
    "prior": {"kind", "weights", "means", "covariances", "variances", "points", "bandwidth"},
    "basin": {"resolution", "bounds_lo", "bounds_hi", "t_max_count", "t_max_lo", "t_max_hi", "iterations",
              "grid_spacing", "tol_x", "tol_g", "checkpoint_every", "census_grid_res", "full_scale"},
    "recon": {"n_px", "n_angles", "noise", "n_train", "prior", "bandwidth", "patch", "stride", "n_components",
              "n_images", "n_seeds", "init", "iterations", "algorithms", "gnc_iterations", "gnc_lambda",
              "grid_spacing", "write_images", "write_traces"},
    "trace": {"x1_a", "x1_b", "algorithm"},
}

ALGORITHMS = ("gnc_flow", "gradient_like", "gradient_descent")

# full-scale basin study: 100 x 100 = 10^4 initial points and 100 values of t_max
FULL_SCALE = {"resolution": 100, "t_max_count": 100}

# constant step of the flow on the toy problem: 2 / (t_max ||A^T A||) at t_max = 10
TOY_LAMBDA_CONST = 0.1


class Config:
    def __init__(self, parser: configparser.ConfigParser | None = None, base_dir: Path | None = None):
        self._cp = parser if parser is not None else configparser.ConfigParser()
        self.base_dir = base_dir or Path.cwd()
        for sec in self._cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            unknown = set(self._cp[sec]) - SECTIONS[sec]
            if unknown:
                raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(unknown))}")

    @classmethod
    def from_file(cls, path) -> "Config":
        path = Path(path)
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        return cls(cp, path.parent)

    @classmethod
    def from_string(cls, text: str, base_dir=None) -> "Config":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls(cp, Path(base_dir) if base_dir else None)

    # -- typed access ---------------------------------------------------------

    def has(self, section: str, key: str) -> bool:
        return self._cp.has_option(section, key)

    def _get(self, section, key, conv, default):
        if not self.has(section, key):
            return default
        raw = self._cp.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc

    def float(self, section, key, default=None):
        return self._get(section, key, float, default)

    def int(self, section, key, default=None):
        return self._get(section, key, int, default)

    def str(self, section, key, default=None):
        return self._get(section, key, str.strip, default)

    def bool(self, section, key, default=None):
        if not self.has(section, key):
            return default
        try:
            return self._cp.getboolean(section, key)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc

    def json(self, section, key, default=None):
        return self._get(section, key, json.loads, default)

    def path(self, section, key, default=None):
        raw = self.str(section, key)
        if raw is None:
            return default
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def _overrides(self, section, spec) -> dict:
        """Read the keys of ``spec`` (key -> converter name) that are present."""
        out = {}
        for key, kind in spec.items():
            if self.has(section, key):
                out[key] = getattr(self, kind)(section, key)
        return out

    # -- builders -------------------------------------------------------------

    def schedule(self, default: DiffusionSchedule | None = None) -> DiffusionSchedule:
        default = default or DiffusionSchedule()
        kw = self._overrides("schedule", {"variant": "str", "sigma": "float", "beta_min": "float",
                                          "beta_max": "float", "t_min": "float", "t_max": "float"})
        try:
            return replace(default, **kw)
        except ValueError as exc:
            raise ConfigError(f"[schedule] {exc}") from exc

    def optimizer(self, default: OptimizerParams | None = None) -> OptimizerParams:
        default = default or OptimizerParams()
        spec = {f.name: ("int" if f.type in ("int", int) else "str" if f.name == "lambda_policy" else "float")
                for f in fields(OptimizerParams)}
        try:
            return replace(default, **self._overrides("optimizer", spec))
        except ValueError as exc:
            raise ConfigError(f"[optimizer] {exc}") from exc

    def algorithm(self, default: str = "gradient_like") -> str:
        algo = self.str("optimizer", "algorithm", default)
        if algo not in ALGORITHMS:
            raise ConfigError(f"[optimizer] algorithm must be one of {ALGORITHMS}, got {algo!r}")
        return algo

    def grid(self, t_min: float, t_max: float, default_count: int, default_spacing: str = "linear"):
        count = self.int("grid", "count", default_count)
        spacing = self.str("grid", "spacing", default_spacing)
        try:
            return make_grid(t_min, t_max, count, spacing)
        except ValueError as exc:
            raise ConfigError(f"[grid] {exc}") from exc

    def prior(self, dim: int | None = None) -> GaussianMixture:
        kind = self.str("prior", "kind", "toy")
        try:
            if kind == "toy":
                return toy_mixture()
            if kind == "mixture":
                block = {k: self.json("prior", k) for k in ("weights", "means", "covariances", "variances")
                         if self.has("prior", k)}
                if "weights" not in block or "means" not in block:
                    raise ConfigError("[prior] kind = mixture needs weights and means")
                if "covariances" not in block and "variances" not in block:
                    raise ConfigError("[prior] kind = mixture needs covariances or variances")
                return GaussianMixture.from_dict(block)
            if kind == "empirical":
                path = self.path("prior", "points")
                bandwidth = self.float("prior", "bandwidth")
                if path is None or bandwidth is None:
                    raise ConfigError("[prior] kind = empirical needs points and bandwidth")
                return empirical_prior(load_points_csv(path), bandwidth)
        except OSError as exc:
            raise ConfigError(f"[prior] cannot read points: {exc}") from exc
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[prior] {exc}") from exc
        raise ConfigError(f"[prior] unknown kind {kind!r}")

    def operator(self):
        kind = self.str("operator", "kind", "toy")
        if kind == "toy":
            return DenseOperator([[1.0, 1.0], [0.0, 0.0]])
        if kind == "dense":
            path = self.path("operator", "matrix")
            if path is None:
                raise ConfigError("[operator] kind = dense needs matrix = <file>")
            try:
                return load_matrix(path)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"[operator] cannot load matrix: {exc}") from exc
        if kind == "radon":
            n_px, n_angles = self.int("operator", "n_px"), self.int("operator", "n_angles")
            if n_px is None or n_angles is None:
                raise ConfigError("[operator] kind = radon needs n_px and n_angles")
            try:
                return build_radon(n_px, n_angles, self.int("operator", "n_det"))
            except ValueError as exc:
                raise ConfigError(f"[operator] {exc}") from exc
        raise ConfigError(f"[operator] unknown kind {kind!r}")

    def problem(self) -> InverseProblem:
        """The configured inverse problem; without [operator]/[problem] keys, the 2-D toy problem."""
        sched = self.schedule()
        alpha = self.float("alpha", "value", 5.0)
        rule = self.str("alpha", "rule", "constant")
        is_toy = self.str("operator", "kind", "toy") == "toy" and not self.has("problem", "measurements")
        try:
            op = self.operator()
            mixture = self.prior()
            if is_toy:
                y = np.array([2.0, 0.0])
            else:
                path = self.path("problem", "measurements")
                if path is None:
                    raise ConfigError("[problem] measurements = <file> is required for non-toy operators")
                try:
                    y = np.loadtxt(path, ndmin=1).ravel()
                except OSError as exc:
                    raise ConfigError(f"[problem] cannot read measurements: {exc}") from exc
            p = InverseProblem.from_mixture(op, y, mixture, sched, alpha, alpha_rule=rule)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        if is_toy and self.str("prior", "kind", "toy") == "toy" and (alpha, rule, sched.variant) == (5.0, "constant", "ve"):
            verify_toy_minimizer(p)
        return p

    def basin(self):
        from .experiments.basin import BasinConfig

        base = BasinConfig()
        kw = self._overrides("basin", {"resolution": "int", "t_max_count": "int", "iterations": "int",
                                       "grid_spacing": "str", "tol_x": "float", "tol_g": "float",
                                       "checkpoint_every": "int"})
        if self.bool("basin", "full_scale", False):
            kw.update(FULL_SCALE)
        kw["bounds"] = (self.float("basin", "bounds_lo", base.bounds[0]), self.float("basin", "bounds_hi", base.bounds[1]))
        kw["t_max_bounds"] = (self.float("basin", "t_max_lo", base.t_max_bounds[0]),
                              self.float("basin", "t_max_hi", base.t_max_bounds[1]))
        algo = self.algorithm("gradient_like")
        if algo == "gradient_descent":
            raise ConfigError("basin sweeps run gnc_flow or gradient_like")
        kw["algorithm"] = algo
        default_policy = "constant" if algo == "gnc_flow" else "armijo_bb"
        kw["params"] = self.optimizer(OptimizerParams(lambda_policy=default_policy, lambda_const=TOY_LAMBDA_CONST))
        try:
            return BasinConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"[basin] {exc}") from exc

    def census_grid_res(self) -> int:
        return self.int("basin", "census_grid_res", 40)

    def recon(self):
        from .experiments.recon import ReconConfig

        base = ReconConfig()
        kw = self._overrides("recon", {"n_px": "int", "n_angles": "int", "noise": "float", "n_train": "int",
                                       "bandwidth": "float", "n_images": "int", "n_seeds": "int", "init": "str",
                                       "iterations": "int", "gnc_iterations": "int", "grid_spacing": "str",
                                       "write_images": "bool", "write_traces": "bool", "prior": "str",
                                       "patch": "int", "stride": "int", "n_components": "int"})
        if self.has("recon", "algorithms"):
            kw["algorithms"] = tuple(a.strip() for a in self.str("recon", "algorithms").split(",") if a.strip())
        if self.has("recon", "gnc_lambda"):
            raw = self.str("recon", "gnc_lambda")
            kw["gnc_lambda"] = None if raw == "auto" else self.float("recon", "gnc_lambda")
        kw["schedule"] = self.schedule(base.schedule)
        kw["alpha"] = self.float("alpha", "value", base.alpha)
        kw["alpha_rule"] = self.str("alpha", "rule", base.alpha_rule)
        kw["params"] = self.optimizer(replace(base.params, max_iters=kw.get("iterations", base.iterations)))
        try:
            return ReconConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"[recon] {exc}") from exc


def load(path=None) -> Config:
    return Config.from_file(path) if path is not None else Config()
