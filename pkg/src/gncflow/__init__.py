"""Graduated non-convexity for linear inverse problems with diffusion-smoothed mixture priors."""

from .objective import InverseProblem, eval_F, eval_f, grad_F, grad_f, toy_problem
from .operators import DenseOperator, RadonOperator, build_radon
from .optimizers import (OptimizerParams, RunTrace, gnc_flow, gnc_flow_batch, gradient_descent,
                         gradient_descent_batch, gradient_like, gradient_like_batch, select_smoothing)
from .priors import GaussianMixture, SmoothedPrior, empirical_prior, toy_mixture
from .schedules import DiffusionSchedule, TimeGrid, kernel_params, make_grid

__version__ = "0.1.0"

__all__ = [
    "DenseOperator", "DiffusionSchedule", "GaussianMixture", "InverseProblem", "OptimizerParams",
    "RadonOperator", "RunTrace", "SmoothedPrior", "TimeGrid", "build_radon", "empirical_prior", "eval_F",
    "eval_f", "gnc_flow", "gnc_flow_batch", "grad_F", "grad_f", "gradient_descent", "gradient_descent_batch",
    "gradient_like", "gradient_like_batch", "kernel_params", "make_grid", "select_smoothing", "toy_mixture",
    "toy_problem",
]
