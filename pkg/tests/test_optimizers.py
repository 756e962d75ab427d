import csv

import numpy as np
import pytest

from gncflow.objective import InverseProblem, eval_f, grad_F, grad_f, grid_minimizer, toy_problem
from gncflow.operators import DenseOperator
from gncflow.optimizers import (OptimizerParams, armijo_backtrack, armijo_search, bb_candidate, describe_flags,
                                gnc_flow, gnc_flow_batch, gradient_descent, gradient_descent_batch, gradient_like,
                                gradient_like_batch, select_smoothing)
from gncflow.priors import GaussianMixture, ShiftedPrior
from gncflow.schedules import DiffusionSchedule, make_grid


@pytest.fixture(scope="module")
def toy():
    return toy_problem()


@pytest.fixture(scope="module")
def x_star(toy):
    return grid_minimizer(toy)


def quad_problem(A, y, t_min=1e-3, t_max=1.0):
    A = DenseOperator(A)
    sched = DiffusionSchedule("ve", sigma=10.0, t_min=t_min, t_max=t_max)
    mix = GaussianMixture([1], np.zeros((1, A.n)), variances=[1.0])
    return InverseProblem.from_mixture(A, y, mix, sched, 0.0)


def half_square(x):
    return 0.5 * x * x


# -- line search ----------------------------------------------------------------------


def test_armijo_full_step_accepted():
    lam = armijo_backtrack(lambda l: half_square(1.0 - l), 0.5, -1.0, c=1e-4, beta=0.5, lam0=1.0)
    assert lam == 1.0


def test_armijo_backtracks_twice():
    # f(1 - 3 lam): lam = 1 gives 2 > -1, lam = 0.5 gives 0.125 > -0.25, lam = 0.25 gives 0.03125 <= 0.125
    lam = armijo_backtrack(lambda l: half_square(1.0 - 3.0 * l), 0.5, -3.0, c=0.5, beta=0.5, lam0=1.0)
    assert lam == 0.25


def test_armijo_condition_is_non_strict():
    # phi(1) equals the Armijo bound exactly
    lam, n_back, ok = armijo_search(lambda l: 1.0 - 0.5 * l, 1.0, -1.0, c=0.5, beta=0.5, lam0=1.0)
    assert (lam, n_back, ok) == (1.0, 0, True)


@pytest.mark.parametrize("slope", [0.0, 1.0])
def test_armijo_rejects_non_descent(slope):
    with pytest.raises(ValueError):
        armijo_backtrack(half_square, 0.5, slope)


def test_armijo_exhaustion_returns_floor():
    lam, n_back, ok = armijo_search(lambda l: 10.0, 0.0, -1.0, max_backtracks=5, lam_min=1e-9)
    assert (lam, n_back, ok) == (1e-9, 5, False)


def test_bb_identity_curvature():
    s = np.array([0.3, -1.2, 2.0])
    assert bb_candidate(s, s) == 1.0


def test_bb_diagonal_quadratic():
    s = np.array([1.0, 1.0])
    assert bb_candidate(s, np.diag([1.0, 4.0]) @ s) == pytest.approx(2.0 / 5.0, rel=1e-15)


def test_bb_degenerate_curvature():
    assert bb_candidate([1.0, 0.0], [0.0, 1.0]) == 1e3
    assert bb_candidate([1.0, 0.0], [-1.0, 0.0], lam_ceil=50.0) == 50.0
    assert bb_candidate([1.0, 0.0], [1e20, 0.0]) == 1e-12


def test_params_validation():
    for bad in (dict(c=0.0), dict(c=1.0), dict(beta=1.0), dict(eps=0.0), dict(lambda_const=0.0),
                dict(lambda_policy="wolfe"), dict(lambda_min=2e3)):
        with pytest.raises(ValueError):
            OptimizerParams(**bad)


def test_describe_flags():
    assert describe_flags(0) == ""
    assert describe_flags(7) == "linesearch_failed|not_descent|nonfinite"


# -- GNC flow ----------------------------------------------------------------------------


def test_gnc_flow_single_step_reaches_measurement():
    y = np.array([1.0, -2.0, 3.0])
    p = quad_problem(np.eye(3), y, t_max=1.0)
    tr = gnc_flow(p, np.zeros(3), [1.0, 1e-3], OptimizerParams(lambda_policy="constant", lambda_const=1.0))
    assert len(tr) == 1
    np.testing.assert_array_equal(tr.x, y)


def test_gnc_flow_from_global_minimum_under_armijo(toy, x_star):
    grid = make_grid(toy.t_min, toy.t_max, 1300, "linear")
    tr = gnc_flow(toy, x_star, grid, OptimizerParams(lambda_policy="armijo"))
    assert eval_f(toy, tr.x) <= eval_f(toy, x_star) + 1e-6
    f = np.append(tr.column("f"), eval_f(toy, tr.x))
    accepted = tr.column("flags") == 0
    assert np.all(np.diff(f)[accepted] <= 0)


def test_gnc_flow_constant_step_stays_near_minimum(toy, x_star):
    grid = make_grid(toy.t_min, toy.t_max, 1300, "linear")
    tr = gnc_flow(toy, x_star, grid, OptimizerParams(lambda_policy="constant", lambda_const=0.1))
    assert np.linalg.norm(tr.x - x_star) < 0.1


def test_gnc_flow_reaches_global_minimum_from_far_corner(toy, x_star):
    grid = make_grid(toy.t_min, 10.0, 1300, "linear")
    tr = gnc_flow(toy, [-8.0, -8.0], grid, OptimizerParams(lambda_policy="constant", lambda_const=0.1))
    assert np.linalg.norm(tr.x - x_star) < 0.1


def test_gnc_flow_unit_step_is_unstable_on_toy(toy):
    # with lambda = 1 the early steps t * ||Hessian|| exceed 2 and the iterates blow up
    grid = make_grid(toy.t_min, 10.0, 1300, "linear")
    res = gnc_flow_batch(toy, np.array([[-8.0, -8.0]]), grid, OptimizerParams(lambda_policy="constant"))
    assert res.reason[0] == "failed" or np.linalg.norm(res.x[0]) > 1e3


def test_gnc_flow_grid_validation(toy):
    with pytest.raises(ValueError):
        gnc_flow(toy, [0.0, 0.0], [1.0, 2.0], OptimizerParams())
    with pytest.raises(ValueError):
        gnc_flow(toy, [0.0, 0.0], [20.0, 1.0], OptimizerParams())


# -- smoothing selection ----------------------------------------------------------------


def test_select_smoothing_without_prior_accepts_first_candidate():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    y = rng.standard_normal(3)
    p = quad_problem(A, y)
    x = rng.standard_normal(3)
    grid = make_grid(1e-3, 1.0, 20, "linear")
    t, d = select_smoothing(p, x, grad_f(p, x), grid, 1.0)
    assert t == 1.0
    np.testing.assert_allclose(d, -1.0 * A.T @ (A @ x - y), rtol=1e-14)


def crafted_1d():
    """Narrow and broad components: smoothing moves the score's sign at x = 0.2."""
    sched = DiffusionSchedule("ve", sigma=10.0, t_min=1e-3, t_max=1.0)
    mix = GaussianMixture([0.5, 0.5], [[0.0], [6.0]], variances=[0.01, 1.0])
    return InverseProblem.from_mixture(DenseOperator([[0.0]]), [0.0], mix, sched, 1.0)


def test_select_smoothing_fallback():
    p = crafted_1d()
    x = np.array([0.2])
    gf = grad_f(p, x)
    grid = make_grid(1e-3, 1.0, 50, "linear")
    inner = np.array([gf @ (-t * grad_F(p, x, t)) for t in grid.values])
    assert inner[0] > 0  # the most smoothed direction climbs f
    t, d = select_smoothing(p, x, gf, grid, 1.0)
    j = int(np.flatnonzero(grid.values == t)[0])
    assert t < 1.0 and gf @ d < 0
    assert np.all(inner[:j] >= 0) and inner[j] < 0
    np.testing.assert_allclose(d, -t * grad_F(p, x, t), rtol=1e-14)


def test_select_smoothing_respects_t_prev():
    p = crafted_1d()
    x = np.array([0.2])
    grid = make_grid(1e-3, 1.0, 50, "linear")
    t, _ = select_smoothing(p, x, grad_f(p, x), grid, grid.values[30])
    assert t == grid.values[30]


def test_select_smoothing_terminal_identity(toy):
    x = np.array([-2.0, 5.0])
    gf = grad_f(toy, x)
    grid = make_grid(toy.t_min, toy.t_max, 100, "log")
    t, d = select_smoothing(toy, x, gf, grid, toy.t_min)
    assert t == toy.t_min
    np.testing.assert_allclose(d, -toy.t_min * gf, rtol=1e-12)
    assert gf @ d == pytest.approx(-toy.t_min * gf @ gf, rel=1e-12)


def test_select_smoothing_needs_nonstationary_point(toy):
    with pytest.raises(ValueError):
        select_smoothing(toy, [0.0, 0.0], [0.0, 0.0], make_grid(toy.t_min, 1.0, 10), 1.0)


# -- gradient-like method ------------------------------------------------------------------


def test_gradient_like_stops_at_stationary_start(toy, x_star):
    tr = gradient_like(toy, x_star, make_grid(toy.t_min, 10.0, 100), OptimizerParams(eps=1e-3))
    assert len(tr) == 0 and tr.reason == "converged"


def test_gradient_like_on_convex_quadratic():
    p = quad_problem(np.eye(2), [0.0, 0.0])
    tr = gradient_like(p, [3.0, -4.0], make_grid(p.t_min, 1.0, 50), OptimizerParams(max_iters=500))
    assert tr.reason == "converged"
    norms = np.linalg.norm(np.array(tr.xs), axis=1)
    assert np.all(np.diff(norms) < 0)
    assert np.linalg.norm(tr.x) < 1e-5


def test_gradient_like_rejects_constant_policy(toy):
    with pytest.raises(ValueError):
        gradient_like(toy, [0.0, 0.0], make_grid(toy.t_min, 10.0, 100), OptimizerParams(lambda_policy="constant"))


@pytest.fixture(scope="module")
def toy_runs(toy):
    X1 = np.random.default_rng(42).uniform(-10, 10, (10, 2))
    grid = make_grid(toy.t_min, 10.0, 1300, "linear")
    res = gradient_like_batch(toy, X1, grid, OptimizerParams(max_iters=1300), record=True)
    return X1, grid, res


def test_gradient_like_reaches_stationarity(toy, toy_runs):
    _, _, res = toy_runs
    stationary = np.linalg.norm(grad_f(toy, res.x), axis=1) < 10 * 1e-6
    assert stationary.sum() >= 9


def test_gradient_like_invariants(toy, toy_runs):
    X1, _, res = toy_runs
    c = 1e-4
    for k in range(len(X1)):
        tr = res.trace(k)
        inner = tr.column("descent_inner")
        assert np.all(inner < 0)
        assert np.all(np.diff(tr.column("t")) <= 0)
        f = np.array([eval_f(toy, x) for x in tr.xs])
        lam = tr.column("lambda")
        flags = tr.column("flags")
        ok = flags == 0
        assert np.all((f[1:] <= f[:-1] + c * lam * inner)[ok])
        assert np.all(np.diff(f)[ok] <= 0)
        # strict whenever the promised decrease is above the rounding of f
        visible = ok & (c * lam * -inner > 4 * np.spacing(np.abs(f[:-1])))
        assert np.all(np.diff(f)[visible] < 0)
        # terminal direction: d = -t_min grad f
        term = tr.column("t") == toy.t_min
        g = np.array([grad_f(toy, x) for x in tr.xs[:-1]])
        d = (np.diff(np.array(tr.xs), axis=0) / lam[:, None])[term]
        np.testing.assert_allclose(d, -toy.t_min * g[term], rtol=1e-8, atol=1e-14)
    assert np.all(res.max_descent_inner < 0) and np.all(res.t_increases == 0)


def test_batch_rows_are_independent(toy, toy_runs):
    X1, grid, res = toy_runs
    single = gradient_like_batch(toy, X1[3:4], grid, OptimizerParams(max_iters=1300))
    np.testing.assert_array_equal(single.x[0], res.x[3])
    assert single.iterations[0] == res.iterations[3]


def _shifted(toy, shift):
    return InverseProblem(toy.operator, toy.measurements, ShiftedPrior(toy.prior, shift), toy.schedule, toy.alpha)


def test_energy_shift_invariance_is_bitwise(toy):
    X1 = np.random.default_rng(5).uniform(-10, 10, (4, 2))
    grid = make_grid(toy.t_min, 10.0, 300)
    params = OptimizerParams(max_iters=300)
    a = gradient_like_batch(toy, X1, grid, params, record=True)
    for shift in (lambda t: np.full(np.shape(t), 3.0), lambda t: np.full(np.shape(t), 2.0**-10)):
        b = gradient_like_batch(_shifted(toy, shift), X1, grid, params, record=True)
        for k in range(4):
            ta, tb = a.trace(k), b.trace(k)
            np.testing.assert_array_equal(ta.column("t"), tb.column("t"))
            np.testing.assert_array_equal(ta.column("lambda"), tb.column("lambda"))
            np.testing.assert_array_equal(np.array(ta.xs), np.array(tb.xs))


def test_energy_shift_general_constant(toy):
    """A shift whose addition rounds f differently can only flip Armijo ties at rounding level."""
    shifted = _shifted(toy, lambda t: 1234.5 * np.asarray(t) ** 2 - 17.0)
    x = np.array([3.0, -6.0])
    gf = grad_f(toy, x)
    grid = make_grid(toy.t_min, 10.0, 300)
    ts = select_smoothing(toy, x, gf, grid, 10.0)
    tt = select_smoothing(shifted, x, grad_f(shifted, x), grid, 10.0)
    assert ts[0] == tt[0]
    np.testing.assert_array_equal(ts[1], tt[1])
    X1 = np.random.default_rng(5).uniform(-10, 10, (4, 2))
    params = OptimizerParams(max_iters=300)
    a = gradient_like_batch(toy, X1, grid, params, record=True)
    b = gradient_like_batch(shifted, X1, grid, params, record=True)
    np.testing.assert_allclose(a.x, b.x, rtol=0, atol=1e-8)
    for k in range(4):
        xa, xb = np.array(a.trace(k).xs), np.array(b.trace(k).xs)
        n = min(len(xa), len(xb))
        split = np.flatnonzero(np.any(xa[:n] != xb[:n], axis=1))
        if split.size:
            # the first differing step follows an accepted step whose promised decrease is below rounding
            i = split[0] - 1
            tr = a.trace(k)
            promised = 1e-4 * tr.records[i].lam * -tr.records[i].descent_inner
            assert promised < 1e3 * np.spacing(abs(tr.records[i].f) + 20.0)


def test_determinism(toy):
    X1 = np.random.default_rng(6).uniform(-10, 10, (3, 2))
    grid = make_grid(toy.t_min, 10.0, 200)
    runs = [gradient_like_batch(toy, X1, grid, OptimizerParams(max_iters=200)) for _ in range(2)]
    np.testing.assert_array_equal(runs[0].x, runs[1].x)
    gd = [gradient_descent(toy, [4.0, -2.0], OptimizerParams(max_iters=200)) for _ in range(2)]
    assert [r.__dict__ for r in gd[0].records] == [r.__dict__ for r in gd[1].records]


def test_trace_csv(tmp_path, toy):
    tr = gradient_like(toy, [5.0, 5.0], make_grid(toy.t_min, 10.0, 50), OptimizerParams(max_iters=20))
    tr.to_csv(tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "t", "lambda", "f", "F", "grad_f_norm", "descent_inner", "flags"]
    assert len(rows) == len(tr) + 1
    assert float(rows[1][3]) == tr.records[0].f


# -- gradient descent ---------------------------------------------------------------------------


def test_gradient_descent_convex_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    y = np.array([1.0, 2.0])
    p = quad_problem(A, y)
    tr = gradient_descent(p, [10.0, -10.0], OptimizerParams(max_iters=2000, eps=1e-10))
    assert tr.reason == "converged"
    np.testing.assert_allclose(tr.x, np.linalg.solve(A, y), atol=1e-9)


def test_gradient_descent_trapped_in_local_basin(toy, x_star):
    start = toy.prior.mixture.means[1] + 0.2  # near a non-global component
    tr = gradient_descent(toy, start, OptimizerParams(max_iters=2000))
    assert np.linalg.norm(grad_f(toy, tr.x)) < 1e-5
    assert eval_f(toy, tr.x) > eval_f(toy, x_star) + 1.0


def test_gradient_descent_batch_equals_single(toy):
    X1 = np.array([[1.0, -7.0], [9.0, 9.0]])
    res = gradient_descent_batch(toy, X1, OptimizerParams(max_iters=100))
    for k in range(2):
        np.testing.assert_array_equal(res.x[k], gradient_descent(toy, X1[k], OptimizerParams(max_iters=100)).x)
