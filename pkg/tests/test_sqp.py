"""Tests for the dense SQP solver, its BFGS update, and the active-set QP."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rfopt.errors import (
    InfeasibleSubproblemError,
    NumericalDomainError,
    NumericalError,
    UnsupportedConstraintError,
)
from rfopt.sqp import (
    STATUS_CONVERGED,
    STATUS_ITERATION_LIMIT,
    STATUS_STALLED,
    OptimizationResult,
    OptimizationSpec,
    bfgs_update,
    minimize,
    solve_qp,
)


def _quadratic(center, scale=1.0):
    center = np.asarray(center, dtype=float)

    def objective(x):
        r = x - center
        return 0.5 * scale * float(r @ r), scale * r

    return objective


def _rosenbrock(x):
    a, b = x
    f = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
    g = np.array(
        [-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]
    )
    return f, g


def test_quadratic_bowl_converges_quickly():
    spec = OptimizationSpec(
        objective=_quadratic([1.0, -2.0, 3.0]),
        initial_point=np.zeros(3),
        kkt_tol=1e-8,
    )
    result = minimize(spec)
    assert result.status == STATUS_CONVERGED
    assert result.iterations <= 30
    assert_allclose(result.solution, [1.0, -2.0, 3.0], rtol=0.0, atol=1e-7)
    assert result.kkt_residual <= 1e-8


def test_equality_constrained_projection():
    # min 0.5 |x - a|^2 s.t. sum(x) = 1 is the affine projection of a, with
    # a unique multiplier -(1 - sum(a)) / n.
    a = np.array([2.0, -1.0, 0.5])
    spec = OptimizationSpec(
        objective=_quadratic(a),
        initial_point=np.zeros(3),
        eq_matrix=np.ones((1, 3)),
        eq_rhs=np.array([1.0]),
        kkt_tol=1e-10,
    )
    result = minimize(spec)
    shift = (1.0 - a.sum()) / 3.0
    assert result.status == STATUS_CONVERGED
    assert_allclose(result.solution, a + shift, rtol=0.0, atol=1e-9)
    assert abs(result.solution.sum() - 1.0) <= 1e-10
    assert result.eq_multipliers[0] == pytest.approx(-shift, abs=1e-9)


def test_equality_with_bounds_lands_on_corner():
    spec = OptimizationSpec(
        objective=_quadratic([2.0, 0.0]),
        initial_point=np.array([0.5, 0.5]),
        eq_matrix=np.array([[1.0, 1.0]]),
        eq_rhs=np.array([1.0]),
        lower_bounds=np.zeros(2),
        upper_bounds=np.ones(2),
    )
    result = minimize(spec)
    assert result.status == STATUS_CONVERGED
    assert_allclose(result.solution, [1.0, 0.0], rtol=0.0, atol=1e-8)
    assert abs(result.solution.sum() - 1.0) <= 1e-10
    assert np.all(result.solution >= -1e-12)
    assert np.all(result.solution <= 1.0 + 1e-12)


def test_rosenbrock_from_standard_start():
    spec = OptimizationSpec(
        objective=_rosenbrock,
        initial_point=np.array([-1.2, 1.0]),
        kkt_tol=1e-9,
        max_iter=500,
    )
    result = minimize(spec)
    assert result.status == STATUS_CONVERGED
    assert_allclose(result.solution, [1.0, 1.0], rtol=0.0, atol=1e-6)


def test_bound_multiplier_signs():
    spec = OptimizationSpec(
        objective=_quadratic([2.0, -3.0], scale=2.0),
        initial_point=np.zeros(2),
        lower_bounds=-np.ones(2),
        upper_bounds=np.ones(2),
        kkt_tol=1e-9,
    )
    result = minimize(spec)
    assert result.status == STATUS_CONVERGED
    assert_allclose(result.solution, [1.0, -1.0], rtol=0.0, atol=1e-9)
    # stationarity g + mu = 0 with mu >= 0 on the active upper bound and
    # mu <= 0 on the active lower bound
    assert result.bound_multipliers[0] == pytest.approx(2.0, abs=1e-7)
    assert result.bound_multipliers[1] == pytest.approx(-4.0, abs=1e-7)


def test_fully_pinned_variables():
    spec = OptimizationSpec(
        objective=_quadratic([2.0]),
        initial_point=np.array([0.7]),
        lower_bounds=np.zeros(1),
        upper_bounds=np.zeros(1),
    )
    result = minimize(spec)
    assert result.status == STATUS_CONVERGED
    assert result.solution[0] == 0.0
    assert result.iterations == 1


def test_bfgs_secant_condition_and_symmetry():
    rng = np.random.default_rng(107)
    a = rng.normal(size=(4, 4))
    h = a @ a.T + 4.0 * np.eye(4)
    s = rng.normal(size=4)
    y = rng.normal(size=4)
    if s @ y < 0.3 * s @ h @ s:
        y = y + h @ s  # ensure an undamped update for the secant check
    updated = bfgs_update(h, s, y)
    assert_allclose(updated, updated.T, rtol=0.0, atol=0.0)
    assert_allclose(updated @ s, y, rtol=1e-12, atol=1e-12)


def test_bfgs_fixed_point_when_y_equals_hs():
    rng = np.random.default_rng(109)
    a = rng.normal(size=(3, 3))
    h = a @ a.T + 3.0 * np.eye(3)
    s = rng.normal(size=3)
    updated = bfgs_update(h, s, h @ s)
    assert_allclose(updated, h, rtol=1e-13)


def test_bfgs_zero_step_is_a_copy():
    h = np.eye(2) * 3.0
    updated = bfgs_update(h, np.zeros(2), np.ones(2))
    assert np.array_equal(updated, h)
    assert updated is not h


def test_bfgs_hereditary_on_quadratic():
    # Updating along the eigenvectors of Q with exact curvature pairs
    # (s, Qs) reproduces Q itself after a full sweep.
    rng = np.random.default_rng(113)
    a = rng.normal(size=(3, 3))
    q = a @ a.T + 3.0 * np.eye(3)
    _, vectors = np.linalg.eigh(q)
    h = np.eye(3)
    for i in range(3):
        s = vectors[:, i]
        h = bfgs_update(h, s, q @ s)
    assert_allclose(h, q, rtol=0.0, atol=1e-6)


def test_bfgs_damping_preserves_definiteness():
    rng = np.random.default_rng(127)
    a = rng.normal(size=(4, 4))
    h = a @ a.T + 4.0 * np.eye(4)
    s = rng.normal(size=4)
    y = -h @ s  # violently negative curvature: s'y < 0
    updated = bfgs_update(h, s, y)
    eigenvalues = np.linalg.eigvalsh(updated)
    assert eigenvalues.min() > 0.0


def test_bfgs_rejects_indefinite_hessian():
    with pytest.raises(NumericalError, match="definiteness"):
        bfgs_update(-np.eye(2), np.array([1.0, 0.0]), np.ones(2))


def test_qp_unconstrained_newton_step():
    n = 3
    d, nu, mu = solve_qp(
        hessian=np.eye(n),
        gradient=-np.eye(n)[0],
        eq_matrix=np.zeros((0, n)),
        eq_rhs=np.zeros(0),
        lower=np.full(n, -10.0),
        upper=np.full(n, 10.0),
        point=np.zeros(n),
    )
    assert_allclose(d, np.eye(n)[0], rtol=0.0, atol=1e-12)
    assert nu.size == 0
    assert_allclose(mu, 0.0, atol=1e-12)


def test_qp_blocking_bound_activates():
    d, _, mu = solve_qp(
        hessian=np.eye(2),
        gradient=np.array([-3.0, 0.0]),
        eq_matrix=np.zeros((0, 2)),
        eq_rhs=np.zeros(0),
        lower=np.full(2, -1.0),
        upper=np.full(2, 1.0),
        point=np.zeros(2),
    )
    assert_allclose(d, [1.0, 0.0], rtol=0.0, atol=1e-12)
    assert mu[0] == pytest.approx(2.0, abs=1e-12)  # active upper: mu >= 0
    assert mu[1] == 0.0


def test_qp_equality_matches_kkt_solve():
    rng = np.random.default_rng(131)
    n, m = 5, 2
    a = rng.normal(size=(n, n))
    hessian = a @ a.T + n * np.eye(n)
    gradient = rng.normal(size=n)
    eq = rng.normal(size=(m, n))
    rhs = rng.normal(size=m)
    point = np.zeros(n)
    kkt = np.block([[hessian, eq.T], [eq, np.zeros((m, m))]])
    expected = np.linalg.solve(kkt, np.concatenate([-gradient, rhs]))
    d, nu, mu = solve_qp(
        hessian, gradient, eq, rhs,
        np.full(n, -50.0), np.full(n, 50.0), point,
    )
    assert_allclose(d, expected[:n], rtol=0.0, atol=1e-10)
    assert_allclose(nu, expected[n:], rtol=0.0, atol=1e-10)
    assert_allclose(mu, 0.0, atol=1e-12)


def test_qp_random_problems_satisfy_kkt():
    rng = np.random.default_rng(137)
    for _ in range(10):
        n = 6
        a = rng.normal(size=(n, n))
        hessian = a @ a.T + n * np.eye(n)
        gradient = 3.0 * rng.normal(size=n)
        eq = rng.normal(size=(1, n))
        rhs = rng.normal(size=1)
        point = rng.uniform(-0.5, 0.5, size=n)
        lower = point - 2.0
        upper = point + 2.0
        d, nu, mu = solve_qp(hessian, gradient, eq, rhs, lower, upper, point)
        x = point + d
        stationarity = hessian @ d + gradient + eq.T @ nu + mu
        assert np.linalg.norm(stationarity, np.inf) <= 1e-8
        assert abs(eq @ x - rhs)[0] <= 1e-8
        assert np.all(x >= lower - 1e-10)
        assert np.all(x <= upper + 1e-10)
        at_lower = x <= lower + 1e-9
        at_upper = x >= upper - 1e-9
        free = ~(at_lower | at_upper)
        assert np.all(mu[free] == 0.0)
        assert np.all(mu[at_lower] <= 1e-9)
        assert np.all(mu[at_upper] >= -1e-9)


def test_inconsistent_equalities_raise():
    spec = OptimizationSpec(
        objective=_quadratic([0.0, 0.0]),
        initial_point=np.zeros(2),
        eq_matrix=np.array([[1.0, 0.0], [1.0, 0.0]]),
        eq_rhs=np.array([0.0, 1.0]),
    )
    with pytest.raises(InfeasibleSubproblemError, match="inconsistent"):
        minimize(spec)


def test_equality_outside_bounds_raises():
    spec = OptimizationSpec(
        objective=_quadratic([0.0, 0.0]),
        initial_point=np.zeros(2),
        eq_matrix=np.array([[1.0, 0.0]]),
        eq_rhs=np.array([5.0]),
        lower_bounds=np.zeros(2),
        upper_bounds=np.ones(2),
    )
    with pytest.raises(InfeasibleSubproblemError, match="equalities and bounds"):
        minimize(spec)


def test_nonlinear_constraints_are_rejected():
    spec = OptimizationSpec(
        objective=_quadratic([0.0]),
        initial_point=np.zeros(1),
        nonlinear_constraints=lambda x: x,
    )
    with pytest.raises(UnsupportedConstraintError, match="bounds only"):
        minimize(spec)


def test_minimize_is_deterministic():
    def make_spec():
        return OptimizationSpec(
            objective=_rosenbrock,
            initial_point=np.array([-1.2, 1.0]),
            max_iter=300,
        )

    first = minimize(make_spec())
    second = minimize(make_spec())
    assert np.array_equal(first.solution, second.solution)
    assert np.array_equal(first.history, second.history)


def test_history_layout():
    result = minimize(
        OptimizationSpec(objective=_quadratic([1.0]), initial_point=np.zeros(1))
    )
    assert result.history.shape[1] == len(OptimizationResult.HISTORY_COLUMNS)
    assert np.all(np.diff(result.history[:, 0]) == 1.0)
    assert result.history[-1, 3] == result.kkt_residual


def test_iteration_limit_status():
    spec = OptimizationSpec(
        objective=_rosenbrock,
        initial_point=np.array([-1.2, 1.0]),
        max_iter=2,
    )
    result = minimize(spec)
    assert result.status == STATUS_ITERATION_LIMIT
    assert result.iterations == 2


def test_line_search_failure_reports_stalled():
    # A gradient pointing away from every descent direction: the model step
    # increases f for every trial, so no step is accepted.
    def lying(x):
        return float(x[0]), np.array([-1.0])

    result = minimize(
        OptimizationSpec(objective=lying, initial_point=np.zeros(1), max_iter=50)
    )
    assert result.status == STATUS_STALLED
    assert result.iterations == 1


def test_objective_exception_carries_iterate():
    calls = {"n": 0}

    def flaky(x):
        calls["n"] += 1
        if calls["n"] > 1:
            raise FloatingPointError("overflow in model")
        return _quadratic([3.0, 3.0])(x)

    spec = OptimizationSpec(objective=flaky, initial_point=np.zeros(2))
    with pytest.raises(FloatingPointError) as excinfo:
        minimize(spec)
    assert hasattr(excinfo.value, "iterate")
    assert excinfo.value.iterate.shape == (2,)


def test_non_finite_start_raises():
    def bad(x):
        return np.nan, np.zeros(1)

    spec = OptimizationSpec(objective=bad, initial_point=np.zeros(1))
    with pytest.raises(NumericalDomainError, match="initial point"):
        minimize(spec)


def test_spec_validation_and_clipping():
    with pytest.raises(ValueError, match="finite"):
        OptimizationSpec(objective=_rosenbrock, initial_point=np.array([np.inf]))
    with pytest.raises(ValueError, match="lower bounds exceed"):
        OptimizationSpec(
            objective=_rosenbrock,
            initial_point=np.zeros(2),
            lower_bounds=np.ones(2),
            upper_bounds=np.zeros(2),
        )
    with pytest.raises(ValueError, match="shapes do not match"):
        OptimizationSpec(
            objective=_rosenbrock,
            initial_point=np.zeros(2),
            eq_matrix=np.ones((1, 2)),
            eq_rhs=np.ones(2),
        )
    with pytest.raises(ValueError, match="max_iter"):
        OptimizationSpec(
            objective=_rosenbrock, initial_point=np.zeros(2), max_iter=0
        )
    spec = OptimizationSpec(
        objective=_rosenbrock,
        initial_point=np.array([5.0, -5.0]),
        lower_bounds=np.zeros(2),
        upper_bounds=np.ones(2),
    )
    assert_allclose(spec.initial_point, [1.0, 0.0])
