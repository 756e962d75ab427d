"""Diffusion-time parametrisation of the perturbation kernel N(gamma_t x0, nu_t^2 I)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VARIANTS = ("ve", "vp")
SPACINGS = ("linear", "log")
ALPHA_RULES = ("constant", "nu_over_gamma")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance-exploding (``ve``) or variance-preserving (``vp``) schedule.

    ``sigma`` is only used by ``ve`` (forward SDE dx = sigma^t dw), the
    ``beta_*`` pair only by ``vp`` (linear beta(s) = beta_min + s (beta_max - beta_min)).
    """

    variant: str = "ve"
    sigma: float = 10.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3
    t_max: float = 10.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown schedule variant {self.variant!r}, expected one of {VARIANTS}")
        if self.variant == "ve" and not self.sigma > 1.0:
            raise ValueError(f"VE schedule needs sigma > 1, got {self.sigma}")
        if self.variant == "vp" and not (self.beta_min > 0 and self.beta_max > 0):
            raise ValueError("VP schedule needs beta_min, beta_max > 0")
        if not (0 < self.t_min < self.t_max):
            raise ValueError(f"need 0 < t_min < t_max, got t_min={self.t_min}, t_max={self.t_max}")

    def with_t_max(self, t_max: float) -> "DiffusionSchedule":
        return DiffusionSchedule(self.variant, self.sigma, self.beta_min, self.beta_max, self.t_min, t_max)


def _check_domain(sched: DiffusionSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    # small slack so grid endpoints computed in floating point are accepted
    if np.any(t < 0) or np.any(t > sched.t_max * (1 + 1e-12)) or not np.all(np.isfinite(t)):
        raise ValueError(f"time outside schedule domain [0, {sched.t_max}]: {t}")
    return t


def nu_squared(sched: DiffusionSchedule, t):
    """Kernel variance nu_t^2 (no domain check)."""
    t = np.asarray(t, dtype=float)
    if sched.variant == "ve":
        log_s = math.log(sched.sigma)
        return np.expm1(2.0 * t * log_s) / (2.0 * log_s)
    return -np.expm1(-_vp_integral(sched, t))  # 1 - gamma^2


def _vp_integral(sched: DiffusionSchedule, t):
    """int_0^t beta(s) ds."""
    return sched.beta_min * t + 0.5 * t**2 * (sched.beta_max - sched.beta_min)


def _vp_gamma(sched: DiffusionSchedule, t):
    return np.exp(-0.5 * _vp_integral(sched, t))


def kernel_params(sched: DiffusionSchedule, t):
    """Return ``(gamma_t, nu_t)`` for scalar or array ``t``."""
    t = _check_domain(sched, t)
    if sched.variant == "ve":
        gamma = np.ones_like(t)
    else:
        gamma = _vp_gamma(sched, t)
    nu = np.sqrt(nu_squared(sched, t))
    if gamma.ndim == 0:
        return float(gamma), float(nu)
    return gamma, nu


def alpha_at(base_alpha: float, sched: DiffusionSchedule, t, rule: str = "constant"):
    """Regularisation weight at time ``t`` under ``rule``."""
    if not base_alpha > 0:
        raise ValueError(f"base alpha must be positive, got {base_alpha}")
    if rule == "constant":
        t = _check_domain(sched, t)
        return base_alpha if t.ndim == 0 else np.full(t.shape, float(base_alpha))
    if rule != "nu_over_gamma":
        raise ValueError(f"unknown alpha rule {rule!r}, expected one of {ALPHA_RULES}")
    gamma, nu = kernel_params(sched, t)
    if np.any(np.asarray(gamma) == 0):
        raise ValueError("gamma_t underflowed to zero; alpha_t = alpha nu_t / gamma_t undefined")
    return base_alpha * nu / gamma


@dataclass(frozen=True)
class TimeGrid:
    values: np.ndarray
    spacing: str

    @property
    def count(self) -> int:
        return len(self.values)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


def make_grid(t_min: float, t_max: float, count: int, spacing: str = "linear") -> TimeGrid:
    """Strictly decreasing grid from ``t_max`` to ``t_min`` (endpoints exact)."""
    if count < 2:
        raise ValueError(f"grid needs at least 2 points, got {count}")
    if not (0 < t_min < t_max) or not math.isfinite(t_max):
        raise ValueError(f"need 0 < t_min < t_max, got t_min={t_min}, t_max={t_max}")
    if spacing == "linear":
        values = np.linspace(t_max, t_min, count)
    elif spacing == "log":
        values = np.geomspace(t_max, t_min, count)
    else:
        raise ValueError(f"unknown grid spacing {spacing!r}, expected one of {SPACINGS}")
    values[0], values[-1] = t_max, t_min
    if np.any(np.diff(values) >= 0):
        raise ValueError("grid is not strictly decreasing; reduce count or widen bounds")
    values.setflags(write=False)
    return TimeGrid(values, spacing)
