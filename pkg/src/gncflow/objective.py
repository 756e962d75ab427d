"""Smoothed objective F(x, t) = 1/2 ||Ax - y||^2 + alpha_t R(x, t) and target f = F(., t_min)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .operators import LinearOperator
from .priors import GaussianMixture, SmoothedPrior
from .schedules import DiffusionSchedule, alpha_at

_T_SLACK = 1e-12


@dataclass(frozen=True)
class InverseProblem:
    operator: LinearOperator
    measurements: np.ndarray
    prior: SmoothedPrior
    schedule: DiffusionSchedule
    alpha: float
    alpha_rule: str = "constant"
    t_min: float | None = None
    t_max: float | None = None

    def __post_init__(self):
        y = np.asarray(self.measurements, dtype=float)
        if y.shape != (self.operator.m,):
            raise ValueError(f"measurements have shape {y.shape}, operator output dimension is {self.operator.m}")
        if self.prior.dim != self.operator.n:
            raise ValueError(f"prior dimension {self.prior.dim} does not match operator input {self.operator.n}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        y.setflags(write=False)
        object.__setattr__(self, "measurements", y)
        if self.t_min is None:
            object.__setattr__(self, "t_min", self.schedule.t_min)
        if self.t_max is None:
            object.__setattr__(self, "t_max", self.schedule.t_max)
        if not (0 < self.t_min < self.t_max):
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")
        if self.t_max > self.schedule.t_max * (1 + _T_SLACK):
            raise ValueError("problem t_max exceeds the schedule's domain")

    @classmethod
    def from_mixture(cls, operator, measurements, mixture: GaussianMixture, schedule, alpha, **kw):
        return cls(operator, measurements, SmoothedPrior(mixture, schedule), schedule, alpha, **kw)

    @property
    def dim(self) -> int:
        return self.operator.n

    def with_t_max(self, t_max: float) -> "InverseProblem":
        return replace(self, t_max=t_max)

    def alpha_at(self, t):
        if self.alpha == 0:
            return np.zeros(np.shape(t)) if np.ndim(t) else 0.0
        return alpha_at(self.alpha, self.schedule, t, self.alpha_rule)

    def check_time(self, t):
        t_arr = np.asarray(t, dtype=float)
        lo, hi = self.t_min * (1 - _T_SLACK), self.t_max * (1 + _T_SLACK)
        if np.any(t_arr < lo) or np.any(t_arr > hi) or not np.all(np.isfinite(t_arr)):
            raise ValueError(f"t must lie in [{self.t_min}, {self.t_max}], got {t}")


@dataclass
class EvalCounter:
    """Operator and prior evaluation counts; owned by a single run."""

    operator: int = 0
    prior: int = 0


@dataclass
class Evaluation:
    value: np.ndarray | float
    grad: np.ndarray | None
    t: np.ndarray | float
    counts: EvalCounter = field(default_factory=EvalCounter)


def evaluate(p: InverseProblem, x, t, need_value=True, need_grad=True, counter: EvalCounter | None = None):
    """Value and/or gradient of F(., t) sharing the residual Ax - y.

    ``x`` is (n,) or (B, n); ``t`` is a scalar or a (B,) array.
    """
    p.check_time(t)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.dim:
        raise ValueError(f"expected x of dimension {p.dim}, got shape {x.shape}")
    counter = counter if counter is not None else EvalCounter()
    single = x.ndim == 1
    X = x.reshape(-1, p.dim)
    alpha = np.asarray(p.alpha_at(t), dtype=float)

    resid = p.operator.apply(X) - p.measurements
    counter.operator += 1
    value = grad = None
    use_prior = p.alpha != 0
    if use_prior:
        counter.prior += 1
        if need_value and need_grad:
            e, s = p.prior.energy_and_score(X, t)
        elif need_value:
            e, s = p.prior.energy(X, t), None
        else:
            e, s = None, p.prior.score(X, t)
    if need_value:
        value = 0.5 * np.einsum("bm,bm->b", resid, resid)
        if use_prior:
            value = value + alpha * e
        if single:
            value = float(value[0])
    if need_grad:
        grad = p.operator.adjoint(resid)
        counter.operator += 1
        if use_prior:
            grad = grad - (alpha[..., None] if alpha.ndim else alpha) * s
        if single:
            grad = grad[0]
    return Evaluation(value, grad, t, counter)


def eval_F(p: InverseProblem, x, t):
    return evaluate(p, x, t, need_grad=False).value


def grad_F(p: InverseProblem, x, t):
    return evaluate(p, x, t, need_value=False).grad


def eval_f(p: InverseProblem, x):
    return eval_F(p, x, p.t_min)


def grad_f(p: InverseProblem, x):
    return grad_F(p, x, p.t_min)


class ToyMinimizerError(RuntimeError):
    pass


def grid_minimizer(p: InverseProblem, bounds=(-10.0, 10.0), res: int = 400) -> np.ndarray:
    """Brute-force minimiser of f on a res x res grid, polished by a local solve."""
    from scipy.optimize import minimize

    g = np.linspace(bounds[0], bounds[1], res)
    a, b = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([a.ravel(), b.ravel()], axis=1)
    vals = evaluate(p, pts, p.t_min, need_grad=False).value
    x0 = pts[int(np.argmin(vals))]
    sol = minimize(lambda z: eval_f(p, z), x0, jac=lambda z: grad_f(p, z), method="BFGS",
                   options={"gtol": 1e-10})
    return sol.x if eval_f(p, sol.x) <= eval_f(p, x0) else x0


def verify_toy_minimizer(p: InverseProblem, expected=(1.0, 1.0), tol: float = 1e-2) -> np.ndarray:
    """Raise :class:`ToyMinimizerError` unless f's global minimiser is within ``tol`` of ``expected``."""
    x = grid_minimizer(p)
    if np.linalg.norm(x - np.asarray(expected)) >= tol:
        raise ToyMinimizerError(f"global minimiser of the toy objective is at {x}, not {tuple(expected)}; "
                                "adjust the mixture so that the expected point is the global minimum")
    return x


def toy_problem(alpha: float = 5.0, sigma: float = 10.0, t_min: float = 1e-3, t_max: float = 10.0,
                mixture: GaussianMixture | None = None, verify: bool = True) -> InverseProblem:
    """Two-dimensional problem with A = [[1, 1], [0, 0]] and y = (2, 0).

    With ``verify`` the default expectation (global minimiser at (1, 1)) is
    checked by grid search.
    """
    from .operators import DenseOperator
    from .priors import toy_mixture

    sched = DiffusionSchedule("ve", sigma=sigma, t_min=t_min, t_max=t_max)
    mixture = mixture if mixture is not None else toy_mixture()
    p = InverseProblem.from_mixture(DenseOperator([[1.0, 1.0], [0.0, 0.0]]), [2.0, 0.0], mixture, sched, alpha)
    if verify:
        verify_toy_minimizer(p)
    return p
