import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from gncflow.schedules import DiffusionSchedule, alpha_at, kernel_params, make_grid, nu_squared

VE = DiffusionSchedule("ve", sigma=10.0)
VP = DiffusionSchedule("vp", beta_min=0.1, beta_max=20.0, t_min=1e-3, t_max=1.0)


def euler_maruyama_variance(sigma, t, steps):
    """Variance of x_t for dx = sigma^s dw, x_0 = 0, under Euler-Maruyama with `steps` steps.

    Each increment sigma^{s_k} dW_k is independent with variance sigma^{2 s_k} dt,
    so the discrete-time variance is the left Riemann sum below (exact for the scheme).
    """
    dt = t / steps
    s = np.arange(steps) * dt
    return float(np.sum(sigma ** (2 * s)) * dt)


@pytest.mark.parametrize("sigma", [2.0, 10.0, 25.0])
def test_ve_at_zero_is_identity_kernel(sigma):
    assert kernel_params(DiffusionSchedule("ve", sigma=sigma), 0.0) == (1.0, 0.0)


def test_ve_variance_matches_euler_maruyama():
    gamma, nu = kernel_params(VE, 1.0)
    em = euler_maruyama_variance(10.0, 1.0, 10**6)
    assert gamma == 1.0
    assert nu**2 == pytest.approx(em, rel=1e-3)
    assert nu**2 == pytest.approx(99 / (2 * math.log(10)), rel=1e-14)
    assert nu**2 == pytest.approx(21.4976, abs=1e-4)


def test_ve_variance_matches_sampled_sde():
    # sampled paths: statistical check of the same quantity (5 standard errors)
    rng = np.random.default_rng(3)
    steps, paths, sigma, t = 200, 40000, 10.0, 1.0
    dt = t / steps
    x = np.zeros(paths)
    for k in range(steps):
        x += sigma ** (k * dt) * math.sqrt(dt) * rng.standard_normal(paths)
    var_hat = x.var()
    se = var_hat * math.sqrt(2.0 / (paths - 1))
    assert abs(var_hat - euler_maruyama_variance(sigma, t, steps)) < 5 * se


def test_vp_gamma_matches_quadrature():
    for t in (0.01, 0.3, 1.0):
        integral, _ = quad(lambda s: 0.1 + s * (20.0 - 0.1), 0.0, t)
        gamma, nu = kernel_params(VP, t)
        assert gamma == pytest.approx(math.exp(-0.5 * integral), rel=1e-12)
        assert nu**2 == pytest.approx(1 - gamma**2, rel=1e-12)
    assert kernel_params(VP, 1.0)[0] == pytest.approx(math.exp(-5.025), rel=1e-14)
    assert kernel_params(VP, 1.0)[0] == pytest.approx(6.5716e-3, rel=1e-4)


def test_vp_unit_total_variance():
    t = np.random.default_rng(0).uniform(0, 1, 1000)
    gamma, nu = kernel_params(VP, t)
    np.testing.assert_allclose(gamma**2 + nu**2, 1.0, atol=1e-12, rtol=0)


def test_vp_monotone():
    t = np.linspace(0, 1, 500)
    gamma, nu = kernel_params(VP, t)
    assert np.all(np.diff(gamma) < 0) and np.all(np.diff(nu) > 0)


def test_ve_strictly_increasing():
    t = np.linspace(0, 10, 500)
    assert np.all(np.diff(nu_squared(VE, t)) > 0)


@pytest.mark.parametrize("t", [-0.1, 10.5, float("nan")])
def test_kernel_domain(t):
    with pytest.raises(ValueError):
        kernel_params(VE, t)


@pytest.mark.parametrize("kw", [dict(variant="xx"), dict(sigma=1.0), dict(variant="vp", beta_min=0.0),
                                dict(t_min=0.0), dict(t_min=2.0, t_max=1.0)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        DiffusionSchedule(**kw)


def test_alpha_rules():
    assert alpha_at(5.0, VE, 3.7) == 5.0
    np.testing.assert_array_equal(alpha_at(5.0, VE, np.array([0.1, 2.0])), [5.0, 5.0])
    assert alpha_at(1.0, VE, 0.0, "nu_over_gamma") == 0.0
    # frozen from the quadrature oracle: sqrt(1 - g^2) / g with g = exp(-5.025)
    g = math.exp(-0.5 * quad(lambda s: 0.1 + 19.9 * s, 0, 1)[0])
    assert alpha_at(1.0, VP, 1.0, "nu_over_gamma") == pytest.approx(math.sqrt(1 - g * g) / g, rel=1e-12)
    assert alpha_at(1.0, VP, 1.0, "nu_over_gamma") == pytest.approx(152.167, abs=1e-3)
    with pytest.raises(ValueError):
        alpha_at(1.0, VE, 1.0, "nope")
    with pytest.raises(ValueError):
        alpha_at(0.0, VE, 1.0)


def test_grid_examples():
    g = make_grid(1e-3, 10, 2, "linear")
    assert list(g.values) == [10.0, 1e-3]
    g = make_grid(1e-3, 10, 5, "log")
    np.testing.assert_allclose(g.values, [10, 1, 0.1, 0.01, 0.001], rtol=1e-12)
    g = make_grid(1e-3, 10, 1300, "linear")
    assert g.count == 1300 and g[0] == 10.0 and g[-1] == 1e-3


@pytest.mark.parametrize("args", [(1e-3, 10, 1, "linear"), (0.0, 1, 5, "log"), (2, 1, 5, "linear"),
                                  (1e-3, 10, 5, "cubic")])
def test_grid_errors(args):
    with pytest.raises(ValueError):
        make_grid(*args)


def test_grid_read_only():
    g = make_grid(0.1, 1.0, 4)
    with pytest.raises(ValueError):
        g.values[0] = 3.0


@settings(max_examples=60, deadline=None)
@given(t_min=st.floats(1e-4, 1.0), span=st.floats(1.01, 100.0), count=st.integers(2, 400),
       spacing=st.sampled_from(["linear", "log"]), variant=st.sampled_from(["ve", "vp"]))
def test_grid_properties(t_min, span, count, spacing, variant):
    t_max = t_min * span
    g = make_grid(t_min, t_max, count, spacing)
    assert g[0] == t_max and g[-1] == t_min
    assert np.all(np.diff(g.values) < 0)
    sched = DiffusionSchedule(variant, t_min=t_min, t_max=t_max)
    _, nu = kernel_params(sched, g.values)
    assert np.all(np.diff(nu) <= 0)  # grid runs backwards in time
