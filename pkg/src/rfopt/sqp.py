"""Dense SQP solver with BFGS curvature, for smooth objectives subject to
linear equality constraints and box bounds.

Each iteration solves a convex quadratic subproblem in the step d,

    minimize   0.5 d' H d + g' d
    subject to A (p + d) = b,   lb <= p + d <= ub,

by a primal active-set method on the bounds with the equalities eliminated
through a null-space basis, then globalizes with Armijo backtracking on the
l1 merit function f + penalty * |A p - b|_1.  All linear algebra is dense and
deterministic, sized for a few dozen variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve, null_space

from .errors import (
    InfeasibleSubproblemError,
    NumericalDomainError,
    NumericalError,
    UnsupportedConstraintError,
)

STATUS_CONVERGED = "converged"
STATUS_ITERATION_LIMIT = "iteration-limit"
STATUS_STALLED = "stalled"

_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 40
_FEASIBILITY_TOL = 1e-8


@dataclass
class OptimizationSpec:
    """Problem data for minimize.

    The objective callback returns (value, gradient).  Bounds may be None
    (unbounded) or arrays with infinities; the initial point is projected
    into the bounds.  Nonlinear constraint callbacks can be carried in
    ``nonlinear_constraints`` for forward compatibility but are rejected by
    the solver.
    """

    objective: Callable[[np.ndarray], tuple[float, np.ndarray]]
    initial_point: np.ndarray
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    lower_bounds: np.ndarray | None = None
    upper_bounds: np.ndarray | None = None
    nonlinear_constraints: object | None = None
    kkt_tol: float = 1e-6
    step_tol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.initial_point, dtype=float))
        if x0.ndim != 1 or not np.all(np.isfinite(x0)):
            raise ValueError("initial point must be a finite 1-d vector")
        n = x0.size
        lb = self._bound(self.lower_bounds, n, -np.inf)
        ub = self._bound(self.upper_bounds, n, np.inf)
        if np.any(lb > ub):
            raise ValueError("lower bounds exceed upper bounds")
        self.lower_bounds = lb
        self.upper_bounds = ub
        self.initial_point = np.clip(x0, lb, ub)
        if self.eq_matrix is None:
            self.eq_matrix = np.zeros((0, n))
            self.eq_rhs = np.zeros(0)
        else:
            self.eq_matrix = np.atleast_2d(np.asarray(self.eq_matrix, dtype=float))
            self.eq_rhs = np.atleast_1d(np.asarray(self.eq_rhs, dtype=float))
            if self.eq_matrix.shape != (self.eq_rhs.size, n):
                raise ValueError("equality matrix and rhs shapes do not match")
        if self.kkt_tol <= 0 or self.step_tol <= 0 or self.max_iter < 1:
            raise ValueError("tolerances must be positive and max_iter >= 1")

    @staticmethod
    def _bound(values, n: int, default: float) -> np.ndarray:
        if values is None:
            return np.full(n, default)
        out = np.atleast_1d(np.asarray(values, dtype=float))
        if out.shape != (n,):
            raise ValueError("bound vectors must match the initial point")
        return out

    @property
    def n_variables(self) -> int:
        return self.initial_point.size


@dataclass
class OptimizationResult:
    solution: np.ndarray
    value: float
    gradient: np.ndarray
    eq_multipliers: np.ndarray
    bound_multipliers: np.ndarray
    kkt_residual: float
    iterations: int
    status: str
    history: np.ndarray = field(repr=False)

    HISTORY_COLUMNS = ("iteration", "value", "step_norm", "kkt_residual", "backtracks")


def bfgs_update(hessian: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Damped BFGS update of a symmetric positive definite matrix.

    Powell damping replaces y with a convex combination of y and H s whenever
    s'y < 0.2 s'Hs, which keeps the update positive definite even for steps
    with negative curvature.  A zero step skips the update.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.linalg.norm(s) == 0.0:
        return hessian.copy()
    hs = hessian @ s
    shs = float(s @ hs)
    if shs <= 0.0 or not np.isfinite(shs):
        raise NumericalError("BFGS curvature s'Hs is not positive; H lost definiteness")
    sy = float(s @ y)
    if sy < 0.2 * shs:
        theta = 0.8 * shs / (shs - sy)
        y = theta * y + (1.0 - theta) * hs
        sy = float(s @ y)
    updated = hessian - np.outer(hs, hs) / shs + np.outer(y, y) / sy
    return 0.5 * (updated + updated.T)


def _initial_hessian(n: int, f0: float, g0: np.ndarray) -> np.ndarray:
    scale = abs(f0) / max(1.0, float(g0 @ g0))
    return np.eye(n) * min(max(scale, 1e-4), 1e4)


def _feasible_start(
    eq: np.ndarray, rhs: np.ndarray, lb: np.ndarray, ub: np.ndarray
) -> np.ndarray:
    """A point satisfying eq @ d = rhs inside [lb, ub], or raise."""
    n = eq.shape[1]
    d = np.clip(np.zeros(n), lb, ub)
    if eq.shape[0] == 0:
        return d
    # consistency of the equality system itself
    solution = np.linalg.lstsq(eq, rhs, rcond=None)[0]
    if np.linalg.norm(eq @ solution - rhs, np.inf) > 1e-8 * (1.0 + np.abs(rhs).max()):
        raise InfeasibleSubproblemError("equality constraints are inconsistent")
    d = solution
    gram = eq @ eq.T
    for _ in range(200):
        boxed = np.clip(d, lb, ub)
        correction = np.linalg.lstsq(gram, rhs - eq @ boxed, rcond=None)[0]
        d = boxed + eq.T @ correction
        if (
            np.all(d >= lb - 1e-12)
            and np.all(d <= ub + 1e-12)
            and np.linalg.norm(eq @ d - rhs, np.inf) <= 1e-10 * (1.0 + np.abs(rhs).max())
        ):
            return np.clip(d, lb, ub)
    raise InfeasibleSubproblemError(
        "could not find a point satisfying both equalities and bounds"
    )


def solve_qp(
    hessian: np.ndarray,
    gradient: np.ndarray,
    eq_matrix: np.ndarray,
    eq_rhs: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    point: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve the SQP subproblem at ``point``.

    Minimizes 0.5 d'Hd + g'd subject to eq_matrix @ d = eq_rhs - eq_matrix @
    point and bound feasibility of point + d.  Returns (d, equality
    multipliers, signed bound multipliers); the multipliers satisfy
    H d + g + A' nu + mu = 0 with mu nonpositive on active lower bounds and
    nonnegative on active upper bounds.
    """
    hessian = np.asarray(hessian, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    n = gradient.size
    m = eq_matrix.shape[0]
    dl = lower - point
    du = upper - point
    rhs = eq_rhs - eq_matrix @ point

    d = _feasible_start(eq_matrix, rhs, dl, du)
    # working set: +1 upper bound active, -1 lower bound active, 0 free
    working = np.zeros(n, dtype=int)
    working[d <= dl + 1e-14] = -1
    working[d >= du - 1e-14] = +1

    nu = np.zeros(m)
    for _ in range(100 + 10 * n):
        free = np.flatnonzero(working == 0)
        c = hessian @ d + gradient
        step = np.zeros(n)
        if free.size:
            h_ff = hessian[np.ix_(free, free)]
            if m:
                basis = null_space(eq_matrix[:, free])
            else:
                basis = np.eye(free.size)
            if basis.shape[1]:
                reduced = basis.T @ h_ff @ basis
                y = cho_solve(cho_factor(reduced), -(basis.T @ c[free]))
                step[free] = basis @ y

        if np.linalg.norm(step, np.inf) > 1e-12:
            alpha = 1.0
            blocking = -1
            block_sign = 0
            for i in free:
                if step[i] > 1e-14 and np.isfinite(du[i]):
                    ratio = (du[i] - d[i]) / step[i]
                    sign = +1
                elif step[i] < -1e-14 and np.isfinite(dl[i]):
                    ratio = (dl[i] - d[i]) / step[i]
                    sign = -1
                else:
                    continue
                ratio = max(ratio, 0.0)
                if ratio < alpha - 1e-15:
                    alpha, blocking, block_sign = ratio, i, sign
            d = d + alpha * step
            if blocking >= 0:
                working[blocking] = block_sign
                d[blocking] = du[blocking] if block_sign > 0 else dl[blocking]
                continue
            # a full step lands exactly on the subspace minimizer; fall
            # through to the multiplier check with the updated gradient
            c = hessian @ d + gradient

        if m:
            if free.size:
                nu = np.linalg.lstsq(eq_matrix[:, free].T, -c[free], rcond=None)[0]
            else:
                nu = np.linalg.lstsq(eq_matrix.T, -c, rcond=None)[0]
        stationarity = c + eq_matrix.T @ nu
        mu = np.where(working != 0, -stationarity, 0.0)
        # lower-bound multiplier is -mu, upper-bound multiplier is +mu
        lagrange = np.where(working < 0, -mu, mu)
        violating = np.flatnonzero((working != 0) & (lagrange < -1e-10))
        if violating.size == 0:
            return d, nu, mu
        working[violating[np.argmin(lagrange[violating])]] = 0
    raise NumericalError("active-set QP failed to terminate")


def _evaluate(spec: OptimizationSpec, x: np.ndarray) -> tuple[float, np.ndarray]:
    try:
        value, gradient = spec.objective(x)
    except Exception as exc:
        exc.iterate = np.array(x, dtype=float, copy=True)
        raise
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != x.shape:
        raise ValueError("objective gradient has the wrong shape")
    return float(value), gradient


def minimize(spec: OptimizationSpec) -> OptimizationResult:
    """SQP iteration with damped BFGS and an l1 merit line search.

    Stops when the KKT residual max(|g + A'nu + mu|_inf, |Ax - b|_inf) drops
    below kkt_tol, when the accepted step collapses below step_tol, or at
    max_iter (status iteration-limit).  The merit function is non-increasing
    across accepted steps.
    """
    if spec.nonlinear_constraints is not None:
        raise UnsupportedConstraintError(
            "this solver handles linear equality constraints and bounds only"
        )
    x = spec.initial_point.copy()
    lb, ub = spec.lower_bounds, spec.upper_bounds
    eq, rhs = spec.eq_matrix, spec.eq_rhs
    f, g = _evaluate(spec, x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalDomainError("objective is not finite at the initial point")

    hessian = _initial_hessian(x.size, f, g)
    penalty = 1.0
    history: list[tuple[float, ...]] = []
    nu = np.zeros(eq.shape[0])
    mu = np.zeros(x.size)
    status = STATUS_ITERATION_LIMIT
    last_step_norm = np.inf
    iterations = 0

    for iteration in range(spec.max_iter):
        iterations = iteration + 1
        d, nu, mu = solve_qp(hessian, g, eq, rhs, lb, ub, x)
        eq_residual = (
            float(np.linalg.norm(eq @ x - rhs, np.inf)) if eq.shape[0] else 0.0
        )
        kkt = max(float(np.linalg.norm(g + eq.T @ nu + mu, np.inf)), eq_residual)
        if kkt <= spec.kkt_tol and eq_residual <= _FEASIBILITY_TOL:
            history.append((iteration, f, 0.0, kkt, 0))
            status = STATUS_CONVERGED
            break
        if last_step_norm <= spec.step_tol:
            history.append((iteration, f, last_step_norm, kkt, 0))
            status = STATUS_STALLED
            break

        penalty = max(
            penalty, 2.0 * (np.abs(nu).max() if nu.size else 0.0) + 1.0
        )
        merit = f + penalty * (np.abs(eq @ x - rhs).sum() if eq.shape[0] else 0.0)
        descent = float(g @ d) - penalty * (
            np.abs(eq @ x - rhs).sum() if eq.shape[0] else 0.0
        )

        alpha = 1.0
        accepted = False
        best = None
        backtracks = 0
        for backtracks in range(_MAX_BACKTRACKS + 1):
            trial = np.clip(x + alpha * d, lb, ub)
            f_t, g_t = _evaluate(spec, trial)
            if np.isfinite(f_t) and np.all(np.isfinite(g_t)):
                merit_t = f_t + penalty * (
                    np.abs(eq @ trial - rhs).sum() if eq.shape[0] else 0.0
                )
                if best is None or merit_t < best[0]:
                    best = (merit_t, trial, f_t, g_t)
                if merit_t <= merit + _ARMIJO_C1 * alpha * descent:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            if best is None or best[0] >= merit:
                history.append((iteration, f, 0.0, kkt, backtracks))
                status = STATUS_STALLED
                break
            _, trial, f_t, g_t = best
        merit_actual = f_t + penalty * (
            np.abs(eq @ trial - rhs).sum() if eq.shape[0] else 0.0
        )
        if merit_actual > merit + 1e-9 * (1.0 + abs(merit)):
            raise NumericalError("merit function increased across an accepted step")

        step = trial - x
        last_step_norm = float(np.linalg.norm(step))
        hessian = bfgs_update(hessian, step, g_t - g)
        x, f, g = trial, f_t, g_t
        history.append((iteration, f, last_step_norm, kkt, backtracks))

    return OptimizationResult(
        solution=x,
        value=f,
        gradient=g,
        eq_multipliers=nu,
        bound_multipliers=mu,
        kkt_residual=history[-1][3] if history else np.inf,
        iterations=iterations,
        status=status,
        history=np.array(history, dtype=float).reshape(-1, 5),
    )
