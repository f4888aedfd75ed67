"""Concrete tolerance-design problems over a one-dimensional random field.

Two problems are provided.  The variance problem minimizes the expected
weighted path energy plus a reciprocal manufacturing cost,

    f(sigma) = E[ integral e(x)^2 w(x) dx ] + integral 1/sigma(x) dx,

whose exact optimum sigma*(x) = (1 / (2 w(x)))^(1/3) serves as the oracle for
the stochastic solver.  The tolerance problem minimizes a surrogate loss
E[ integral e^2 w_t dx ] with w_t concentrated near x = 0, subject to a fixed
variability budget integral sigma = V_b and a cap sigma <= sigma_max.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BoundViolationError
from .kl import build_kl, draw_realizations
from .numerics import QuadratureRule, SplineField, spline_basis_matrix
from .randomfield import (
    KIND_SQUARED_EXPONENTIAL,
    CovarianceModel,
    Grid1D,
    assemble_covariance,
)
from .saa import METHOD_SCALED, SAAProblem
from .sensitivity import fixed_order_mean
from .sqp import OptimizationSpec

N_SIGMA_DEFAULT = 20
CORRELATION_LENGTH_DEFAULT = 0.1
SIGMA_MIN_DEFAULT = 0.2
SCATTER_THRESHOLD_DEFAULT = 0.9999


def default_weight(x):
    """w(x) = 2 + sin(2 pi x); strictly positive on [0, 1]."""
    return 2.0 + np.sin(2.0 * np.pi * np.asarray(x, dtype=float))


def tolerance_weight(x):
    """Surrogate loss weight 1 + 9 exp(-x^2 / (2 * 0.05^2)).

    Concentrates the penalty near x = 0 so that imperfections close to the
    left edge dominate the loss.
    """
    x = np.asarray(x, dtype=float)
    return 1.0 + 9.0 * np.exp(-(x**2) / (2.0 * 0.05**2))


def _weight_values(weight, points: np.ndarray) -> np.ndarray:
    values = np.asarray(weight(points) if callable(weight) else weight, dtype=float)
    if values.shape != points.shape:
        raise ValueError("weight values must match the evaluation points")
    return values


def _default_sigma() -> SplineField:
    return SplineField(np.ones(N_SIGMA_DEFAULT))


def _default_rule() -> QuadratureRule:
    return QuadratureRule(intervals=20, nodes_per_interval=2)


def _default_correlation() -> CovarianceModel:
    return CovarianceModel(KIND_SQUARED_EXPONENTIAL, CORRELATION_LENGTH_DEFAULT)


@dataclass
class VarianceProblem:
    """Unconstrained (up to a floor) trade-off between path energy and cost."""

    weight: Callable[[np.ndarray], np.ndarray] = default_weight
    sigma: SplineField = field(default_factory=_default_sigma)
    rule: QuadratureRule = field(default_factory=_default_rule)
    correlation: CovarianceModel = field(default_factory=_default_correlation)
    sigma_min: float = SIGMA_MIN_DEFAULT

    def __post_init__(self):
        if not self.sigma_min > 0.0:
            raise ValueError("sigma_min must be positive")
        if np.any(_weight_values(self.weight, self.rule.nodes) <= 0.0):
            raise ValueError("weight must be positive on [0, 1]")


@dataclass
class ToleranceProblem:
    """Budgeted surrogate: spend a fixed total variability where it hurts least."""

    weight: Callable[[np.ndarray], np.ndarray] = tolerance_weight
    budget: float = 0.98
    sigma_max: float = 1.1
    sigma_base: SplineField = field(default_factory=_default_sigma)
    rule: QuadratureRule = field(default_factory=_default_rule)
    correlation: CovarianceModel = field(default_factory=_default_correlation)
    sigma_min_factor: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.sigma_min_factor < 1.0:
            raise ValueError("sigma_min_factor must lie in (0, 1)")
        base_volume = variability_metric(self.sigma_base, self.rule)[0]
        if not 0.0 < self.budget <= base_volume:
            raise ValueError(
                f"budget {self.budget} must be positive and at most the baseline "
                f"volume {base_volume}"
            )
        if self.sigma_max < float(np.max(self.sigma_base.coefficients)):
            raise ValueError("sigma_max must not cut below the baseline field")


class QuadraticPathLoss:
    """Functional F(e) = integral e(x)^2 weight(x) dx on the quadrature nodes."""

    def __init__(self, rule: QuadratureRule, weight):
        self.rule = rule
        self.node_scale = rule.weights * _weight_values(weight, rule.nodes)

    def values(self, paths: np.ndarray) -> np.ndarray:
        paths = np.asarray(paths, dtype=float)
        if paths.shape[-1] != self.node_scale.size:
            raise ValueError("paths must be sampled on the quadrature nodes")
        return (paths**2) @ self.node_scale

    def path_gradient(self, paths: np.ndarray) -> np.ndarray:
        return 2.0 * np.asarray(paths, dtype=float) * self.node_scale


class ReciprocalCost:
    """Deterministic cost integral 1/sigma(x) dx over the scale coefficients.

    Acts on the trailing block of the parameter vector so it can be attached
    to problems that also carry mean parameters.
    """

    def __init__(self, sigma: SplineField, rule: QuadratureRule, sigma_min: float):
        self.template = sigma
        self.rule = rule
        self.sigma_min = sigma_min
        self.n_sigma = sigma.n_coefficients

    def _field(self, p: np.ndarray) -> SplineField:
        return SplineField(np.asarray(p, dtype=float)[-self.n_sigma:])

    def value_gradient(self, p: np.ndarray) -> tuple[float, np.ndarray]:
        value, grad_sigma = f2(self._field(p), self.rule, self.sigma_min)
        gradient = np.zeros(np.asarray(p).size)
        gradient[-self.n_sigma:] = grad_sigma
        return value, gradient

    def hessian(self, p: np.ndarray) -> np.ndarray:
        n = np.asarray(p).size
        out = np.zeros((n, n))
        out[-self.n_sigma:, -self.n_sigma:] = f2_hessian(
            self._field(p), self.rule, self.sigma_min
        )
        return out


def f1_per_sample(path: np.ndarray, weight, rule: QuadratureRule):
    """Quadrature of e^2 w for one path (or one value per row of a batch)."""
    path = np.asarray(path, dtype=float)
    if path.shape[-1] != rule.n_nodes:
        raise ValueError("path must be sampled on the quadrature nodes")
    w = _weight_values(weight, rule.nodes)
    result = (path**2 * w) @ rule.weights
    return float(result) if path.ndim == 1 else result


def _sigma_nodes(
    sigma: SplineField, rule: QuadratureRule, sigma_min: float
) -> tuple[np.ndarray, np.ndarray]:
    basis = spline_basis_matrix(sigma, rule.nodes)
    values = basis @ sigma.coefficients
    if np.any(values < sigma_min - 1e-12):
        worst = float(values.min())
        raise BoundViolationError(
            f"sigma(x) = {worst:.6g} falls below sigma_min = {sigma_min:.6g} "
            "at a quadrature node"
        )
    if np.any(values <= 0.0):
        raise BoundViolationError("sigma(x) must be positive at all quadrature nodes")
    return basis, values


def f2(
    sigma: SplineField, rule: QuadratureRule, sigma_min: float = 0.0
) -> tuple[float, np.ndarray]:
    """Cost integral 1/sigma dx and its gradient -integral B_k/sigma^2 dx."""
    basis, values = _sigma_nodes(sigma, rule, sigma_min)
    value = float(rule.weights @ (1.0 / values))
    gradient = -(basis.T @ (rule.weights / values**2))
    return value, gradient


def f2_hessian(
    sigma: SplineField, rule: QuadratureRule, sigma_min: float = 0.0
) -> np.ndarray:
    """Second derivative matrix integral 2 B_k B_l / sigma^3 dx."""
    basis, values = _sigma_nodes(sigma, rule, sigma_min)
    scale = 2.0 * rule.weights / values**3
    return basis.T @ (scale[:, None] * basis)


def analytic_optimum(weight_values) -> np.ndarray:
    """Exact minimizer sigma*(x) = (1 / (2 w(x)))^(1/3) of the variance problem."""
    w = np.asarray(weight_values, dtype=float)
    if np.any(w <= 0.0):
        raise ValueError("weight must be positive")
    return (1.0 / (2.0 * w)) ** (1.0 / 3.0)


def exact_f1(sigma: SplineField, weight, rule: QuadratureRule) -> float:
    """Exact expectation integral sigma^2 w dx of the path-energy term."""
    basis = spline_basis_matrix(sigma, rule.nodes)
    values = basis @ sigma.coefficients
    w = _weight_values(weight, rule.nodes)
    return float(rule.weights @ (values**2 * w))


def analytic_f1_gradient(sigma: SplineField, weight, rule: QuadratureRule) -> np.ndarray:
    """Gradient of the exact expectation: component k = integral 2 sigma w B_k dx."""
    basis = spline_basis_matrix(sigma, rule.nodes)
    values = basis @ sigma.coefficients
    w = _weight_values(weight, rule.nodes)
    return basis.T @ (2.0 * rule.weights * w * values)


def variability_metric(
    sigma: SplineField, rule: QuadratureRule
) -> tuple[float, np.ndarray]:
    """Total variability integral sigma dx; linear, so the gradient is constant."""
    basis = spline_basis_matrix(sigma, rule.nodes)
    gradient = basis.T @ rule.weights
    return float(gradient @ sigma.coefficients), gradient


def build_variance_saa(
    problem: VarianceProblem,
    seed: int,
    n_samples: int,
    method: str = METHOD_SCALED,
    threshold: float = SCATTER_THRESHOLD_DEFAULT,
    include_deterministic: bool = True,
) -> tuple[SAAProblem, OptimizationSpec]:
    """Fixed-draw instance of the variance problem plus its solver spec.

    The truncation level comes from the partial-scatter threshold of the unit
    correlation and is then frozen into the draw matrix.  Setting
    ``include_deterministic`` to False drops the reciprocal cost, leaving the
    purely stochastic part (useful for gradient verification).
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    grid = Grid1D.from_quadrature(problem.rule)
    pilot = build_kl(assemble_covariance(problem.correlation, grid), threshold=threshold)
    draws = draw_realizations(seed, n_samples, pilot.truncation_level)
    functional = QuadraticPathLoss(problem.rule, problem.weight)
    deterministic = (
        ReciprocalCost(problem.sigma, problem.rule, problem.sigma_min)
        if include_deterministic
        else None
    )
    saa = SAAProblem(
        functional,
        grid,
        problem.correlation,
        problem.sigma,
        draws,
        method=method,
        deterministic_term=deterministic,
    )
    n = problem.sigma.n_coefficients
    spec = OptimizationSpec(
        objective=saa.objective,
        initial_point=np.ones(n),
        lower_bounds=np.full(n, problem.sigma_min),
    )
    return saa, spec


def build_gradcheck_saa(
    problem: VarianceProblem,
    seed: int,
    n_samples: int,
    method: str = METHOD_SCALED,
    threshold: float = SCATTER_THRESHOLD_DEFAULT,
) -> tuple[SAAProblem, np.ndarray]:
    """Derivative-verification variant of the variance estimator.

    Adds an explicit mean block (same spline space as the scale) and drops
    the deterministic cost, so finite differences probe exactly the pathwise
    estimator: parameters are [mean coefficients, scale coefficients],
    starting from zero mean and unit scale.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    grid = Grid1D.from_quadrature(problem.rule)
    pilot = build_kl(assemble_covariance(problem.correlation, grid), threshold=threshold)
    draws = draw_realizations(seed, n_samples, pilot.truncation_level)
    n = problem.sigma.n_coefficients
    saa = SAAProblem(
        QuadraticPathLoss(problem.rule, problem.weight),
        grid,
        problem.correlation,
        problem.sigma,
        draws,
        method=method,
        mean_basis=spline_basis_matrix(problem.sigma, grid.points),
    )
    p0 = np.concatenate([np.zeros(n), np.ones(n)])
    return saa, p0


def build_tolerance_saa(
    problem: ToleranceProblem,
    seed: int,
    n_samples: int,
    threshold: float = SCATTER_THRESHOLD_DEFAULT,
) -> tuple[SAAProblem, OptimizationSpec]:
    """Fixed-draw instance of the budgeted tolerance surrogate.

    Uses the scaled-field sensitivity route with the unit paths rescaled to
    an exactly unit empirical second moment, and starts from the baseline
    field scaled uniformly onto the budget.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    base = problem.sigma_base
    n = base.n_coefficients
    base_volume, volume_grad = variability_metric(base, problem.rule)
    lower = problem.sigma_min_factor * base.coefficients
    upper = np.full(n, problem.sigma_max)
    achievable_min = float(volume_grad @ lower)
    achievable_max = float(volume_grad @ upper)
    if not achievable_min - 1e-12 <= problem.budget <= achievable_max + 1e-12:
        raise ValueError(
            f"budget {problem.budget} is outside the achievable volume range "
            f"[{achievable_min:.6g}, {achievable_max:.6g}]"
        )
    grid = Grid1D.from_quadrature(problem.rule)
    pilot = build_kl(assemble_covariance(problem.correlation, grid), threshold=threshold)
    draws = draw_realizations(seed, n_samples, pilot.truncation_level)
    saa = SAAProblem(
        QuadraticPathLoss(problem.rule, problem.weight),
        grid,
        problem.correlation,
        base,
        draws,
        method=METHOD_SCALED,
        match_second_moment=True,
    )
    x0 = (problem.budget / base_volume) * base.coefficients
    spec = OptimizationSpec(
        objective=saa.objective,
        initial_point=x0,
        eq_matrix=volume_grad[None, :],
        eq_rhs=np.array([problem.budget]),
        lower_bounds=lower,
        upper_bounds=upper,
    )
    return saa, spec


def scaled_route_hessian(saa: SAAProblem, p: np.ndarray) -> np.ndarray:
    """Exact average per-sample Hessian for a quadratic loss on scaled paths.

    With e = sigma u and F quadratic in the path, the per-sample Hessian in
    the scale coefficients is 2 B' diag(q w u_n^2) B plus the deterministic
    term, so the average only needs the empirical second moment of the unit
    paths.  Used by the sandwich estimator instead of finite differences.
    """
    if saa.method != METHOD_SCALED or not isinstance(saa.functional, QuadraticPathLoss):
        raise ValueError("closed-form Hessian needs the scaled route and a quadratic loss")
    if saa.n_mean_params:
        raise ValueError("closed-form Hessian implemented for scale-only problems")
    second = fixed_order_mean(saa.unit_paths**2, axis=0)
    scale = saa.functional.node_scale * second
    hessian = 2.0 * saa.sigma_basis.T @ (scale[:, None] * saa.sigma_basis)
    if saa.deterministic_term is not None:
        hessian = hessian + saa.deterministic_term.hessian(np.asarray(p, dtype=float))
    return hessian
