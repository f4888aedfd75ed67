"""Sample-average approximation of expectation functionals over random fields.

Fixing a draw matrix turns the expectation f(p) = E[F(e(., p))] into the
deterministic average f_N(p) = (1/N) sum_n F(e_n(p)), which can be handed to a
smooth optimizer together with its pathwise gradient.  The registered
functional must be continuously differentiable in the path values with
derivatives bounded by integrable envelopes near the evaluation point; that is
what justifies differentiating under the expectation, and it holds for the
quadratic integral functionals used here.

At a candidate optimum, sandwich asymptotics give parameter standard errors:
with B = mean Hessian of F and S = mean outer product of per-sample gradients,
sqrt(N) (p_N - p*) is asymptotically normal with covariance B^-1 S B^-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np
from scipy.special import ndtri

from .errors import InferenceError, NumericalDomainError
from .kl import KLBasis, RealizationSet, build_kl, sample_paths
from .numerics import SplineField, spline_basis_matrix, sym_eigendecompose
from .randomfield import (
    KIND_SCALED,
    KIND_SQUARED_EXPONENTIAL,
    CovarianceModel,
    Grid1D,
    assemble_covariance,
    covariance_param_derivative,
)
from .sensitivity import (
    align_signs,
    covariance_path_sensitivity,
    eigen_derivatives,
    fixed_order_mean,
)

METHOD_SCALED = "scaled"
METHOD_EIGEN = "eigen"


class Functional(Protocol):
    """Per-path value and discrete path gradient of a functional F(e)."""

    def values(self, paths: np.ndarray) -> np.ndarray:
        """F for each path; paths has one sample per row."""

    def path_gradient(self, paths: np.ndarray) -> np.ndarray:
        """dF_n / d e_n(x_g) for each sample and grid node (same shape)."""


class DeterministicTerm(Protocol):
    """A smooth parameter-only term added to every per-sample value."""

    def value_gradient(self, p: np.ndarray) -> tuple[float, np.ndarray]: ...

    def hessian(self, p: np.ndarray) -> np.ndarray: ...


@dataclass
class SAAEstimate:
    value: float
    gradient: np.ndarray
    per_sample_values: np.ndarray
    per_sample_gradients: np.ndarray


@dataclass
class InferenceReport:
    """Sandwich-estimator output at a candidate optimum."""

    hessian: np.ndarray
    score_covariance: np.ndarray
    parameter_covariance: np.ndarray
    std_err: np.ndarray
    objective_variance: float
    confidence_level: float

    def ci_halfwidth(self) -> np.ndarray:
        return _normal_quantile(self.confidence_level) * self.std_err


def _normal_quantile(confidence: float) -> float:
    # The 95% band is pinned to the conventional 1.96 rather than the exact
    # quantile 1.95996...; other levels use the exact inverse CDF.
    if confidence == 0.95:
        return 1.96
    return float(ndtri(0.5 * (1.0 + confidence)))


class SAAProblem:
    """A fixed-draw Monte Carlo objective over a spline-parameterized field.

    The parameter vector is [mean coefficients, scale coefficients]; the mean
    block is empty unless a mean basis is given.  Two sensitivity methods are
    supported for the scale block:

    * ``scaled``: paths are sigma(x) times fixed unit-variance paths, so both
      the objective and its derivatives are closed-form in sigma;
    * ``eigen``: the covariance sigma(x) sigma(y) rho(x, y) is reassembled and
      its K-L basis rebuilt at every evaluation point, with path derivatives
      through the eigenpair perturbations.  Rebuilt modes are sign-aligned
      against the previous evaluation's modes so that nearby evaluations stay
      on the same eigenvector branch.

    The truncation level is frozen at construction so the draw matrix keeps a
    consistent meaning across evaluations.  ``match_second_moment`` rescales
    the fixed unit paths so their empirical second moment is exactly one at
    every node (a deterministic transform of the draw set; used by the
    tolerance surrogate so that its quadratic objective weights are exact).
    """

    def __init__(
        self,
        functional: Functional,
        grid: Grid1D,
        correlation: CovarianceModel,
        sigma_field: SplineField,
        draws: RealizationSet,
        method: str = METHOD_SCALED,
        mean_basis: np.ndarray | None = None,
        deterministic_term: DeterministicTerm | None = None,
        match_second_moment: bool = False,
    ):
        if method not in (METHOD_SCALED, METHOD_EIGEN):
            raise ValueError(f"unknown sensitivity method {method!r}")
        if correlation.kind != KIND_SQUARED_EXPONENTIAL:
            raise ValueError(
                "SAA problems need a unit-variance squared-exponential "
                f"correlation, got kind {correlation.kind!r}"
            )
        if match_second_moment and method != METHOD_SCALED:
            raise ValueError("match_second_moment applies to the scaled method only")
        self.functional = functional
        self.grid = grid
        self.correlation = correlation
        self.sigma_field = sigma_field
        self.draws = draws
        self.method = method
        self.mean_basis = None if mean_basis is None else np.asarray(mean_basis, float)
        if self.mean_basis is not None and self.mean_basis.shape[0] != grid.n_points:
            raise ValueError("mean_basis rows must match the grid")
        self.deterministic_term = deterministic_term

        self.sigma_basis = spline_basis_matrix(sigma_field, grid.points)
        self._unit_cov = assemble_covariance(correlation, grid)
        self._unit_basis = build_kl(self._unit_cov, n_modes=draws.n_modes)
        self._unit_paths = sample_paths(self._unit_basis, draws)
        if match_second_moment:
            second = fixed_order_mean(self._unit_paths**2, axis=0)
            self._unit_paths = self._unit_paths / np.sqrt(second)
        self.n_modes = draws.n_modes
        # sign reference for eigen-route rebuilds, updated on every rebuild
        self._ref_modes = self._unit_basis.modes.copy()

    @property
    def unit_paths(self) -> np.ndarray:
        """The fixed unit-variance paths driving the scaled route."""
        return self._unit_paths

    @property
    def n_mean_params(self) -> int:
        return 0 if self.mean_basis is None else self.mean_basis.shape[1]

    @property
    def n_sigma_params(self) -> int:
        return self.sigma_field.n_coefficients

    @property
    def n_params(self) -> int:
        return self.n_mean_params + self.n_sigma_params

    def split(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_params,):
            raise ValueError(f"parameter vector must have shape ({self.n_params},)")
        if not np.all(np.isfinite(p)):
            raise ValueError("parameter vector contains non-finite entries")
        return p[: self.n_mean_params], p[self.n_mean_params:]

    def objective(self, p: np.ndarray) -> tuple[float, np.ndarray]:
        """(value, gradient) callback for the optimizer."""
        est = evaluate(self, p)
        return est.value, est.gradient

    def _rebuild_basis(self, sigma_coeffs: np.ndarray):
        """Eigen route: reassemble the covariance at sigma and rebuild the
        K-L basis on the frozen truncation level, staying on the reference
        sign branch."""
        model = CovarianceModel(
            kind=KIND_SCALED,
            correlation_length=self.correlation.correlation_length,
            scale_field=SplineField(sigma_coeffs),
        )
        cov = assemble_covariance(model, self.grid)
        basis = build_kl(cov, n_modes=self.n_modes)
        aligned = align_signs(self._ref_modes, basis.modes)
        basis = KLBasis(
            eigenvalues=basis.eigenvalues,
            modes=aligned,
            mean_field=basis.mean_field,
            grid=basis.grid,
            partial_scatter=basis.partial_scatter,
            total_scatter=basis.total_scatter,
        )
        self._ref_modes = aligned.copy()
        return model, cov, basis


def evaluate(problem: SAAProblem, p: np.ndarray) -> SAAEstimate:
    """Deterministic fixed-draw estimate of the objective and its gradient.

    Calling twice with the same parameters returns bit-identical results: the
    draw matrix is fixed, eigendecompositions are deterministic, and all
    Monte Carlo reductions use exactly rounded sums.
    """
    mean_c, sigma_c = problem.split(p)
    grid = problem.grid
    mean_vals = 0.0 if problem.mean_basis is None else problem.mean_basis @ mean_c
    n = problem.draws.n_samples

    if problem.method == METHOD_SCALED:
        sigma_vals = problem.sigma_basis @ sigma_c
        paths = mean_vals + sigma_vals * problem._unit_paths
    else:
        model, cov, basis = problem._rebuild_basis(sigma_c)
        paths = mean_vals + sample_paths(basis, problem.draws)

    values = np.asarray(problem.functional.values(paths), dtype=float)
    if values.shape != (n,):
        raise ValueError("functional.values must return one value per sample")
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericalDomainError(
            f"functional evaluation failed on sample {bad[0]} (non-finite value)"
        )
    pathgrad = np.asarray(problem.functional.path_gradient(paths), dtype=float)
    if pathgrad.shape != paths.shape:
        raise ValueError("functional.path_gradient must match the path shape")

    grads = np.empty((n, problem.n_params))
    nm = problem.n_mean_params
    if nm:
        grads[:, :nm] = pathgrad @ problem.mean_basis
    if problem.method == METHOD_SCALED:
        grads[:, nm:] = (pathgrad * problem._unit_paths) @ problem.sigma_basis
    else:
        w_sqrt = np.sqrt(grid.weights)
        sym = w_sqrt[:, None] * cov.entries * w_sqrt[None, :]
        spectrum = sym_eigendecompose(sym)
        for k in range(problem.n_sigma_params):
            dcov = covariance_param_derivative(model, grid, 1 + k)
            derivs = eigen_derivatives(cov, basis, dcov, full_spectrum=spectrum)
            sens = covariance_path_sensitivity(basis, derivs, problem.draws)
            grads[:, nm + k] = np.einsum("ng,ng->n", pathgrad, sens.dpaths)

    if problem.deterministic_term is not None:
        det_value, det_grad = problem.deterministic_term.value_gradient(p)
        values = values + det_value
        grads = grads + det_grad

    bad = np.flatnonzero(~np.all(np.isfinite(grads), axis=1))
    if bad.size:
        raise NumericalDomainError(
            f"per-sample gradient is not finite at sample {bad[0]}"
        )
    return SAAEstimate(
        value=float(fixed_order_mean(values)),
        gradient=fixed_order_mean(grads, axis=0),
        per_sample_values=values,
        per_sample_gradients=grads,
    )


def inference(
    estimate: SAAEstimate,
    hessian: np.ndarray,
    confidence: float = 0.95,
) -> InferenceReport:
    """Sandwich standard errors from a fixed-draw estimate at an optimum.

    ``hessian`` is either the stack of per-sample Hessians (N x P x P), whose
    fixed-order mean becomes B, or an already-averaged P x P matrix (e.g. the
    finite-difference fallback from fd_hessian).
    """
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    grads = estimate.per_sample_gradients
    n, n_params = grads.shape
    hessian = np.asarray(hessian, dtype=float)
    if hessian.ndim == 3:
        if hessian.shape != (n, n_params, n_params):
            raise ValueError("per-sample Hessian stack has the wrong shape")
        b_hat = np.empty((n_params, n_params))
        for i in range(n_params):
            for j in range(n_params):
                b_hat[i, j] = fixed_order_mean(hessian[:, i, j])
    elif hessian.shape == (n_params, n_params):
        b_hat = hessian
    else:
        raise ValueError(f"hessian shape {hessian.shape} not understood")

    score_cov = (grads.T @ grads) / n
    score_cov = 0.5 * (score_cov + score_cov.T)

    try:
        b_inv = np.linalg.inv(b_hat)
    except np.linalg.LinAlgError as exc:
        raise InferenceError(f"estimated Hessian is singular: {exc}") from exc
    cond = np.linalg.cond(b_hat)
    if not np.isfinite(cond) or cond > 1e14:
        raise InferenceError(
            f"estimated Hessian is numerically singular (condition {cond:.3e})"
        )
    param_cov = b_inv @ score_cov @ b_inv.T / n
    variance = np.diag(param_cov).copy()
    # tiny negatives can appear through rounding in the triple product
    variance[variance < 0.0] = 0.0

    values = estimate.per_sample_values
    gamma_sq = float(fixed_order_mean(values**2) - fixed_order_mean(values) ** 2)
    return InferenceReport(
        hessian=b_hat,
        score_covariance=score_cov,
        parameter_covariance=param_cov,
        std_err=np.sqrt(variance),
        objective_variance=gamma_sq,
        confidence_level=confidence,
    )


def fd_hessian(
    gradient_fn: Callable[[np.ndarray], np.ndarray],
    p: np.ndarray,
    h: float = 1e-4,
) -> np.ndarray:
    """Central-difference Hessian of a gradient callback, symmetrized."""
    p = np.asarray(p, dtype=float)
    n_params = p.size
    hess = np.empty((n_params, n_params))
    for j in range(n_params):
        step = np.zeros(n_params)
        step[j] = h
        hess[:, j] = (gradient_fn(p + step) - gradient_fn(p - step)) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def optimality_asymptotics_check(optima_by_n: Mapping[int, np.ndarray]) -> float:
    """Least-squares slope of log std(optimum) against log N.

    Needs at least two distinct sample sizes with at least 30 replications
    each.  Identical optima everywhere give slope zero by convention.
    """
    if len(optima_by_n) < 2:
        raise ValueError("need at least two distinct sample sizes")
    n_values = np.array(sorted(optima_by_n), dtype=float)
    stds = []
    for n in sorted(optima_by_n):
        reps = np.asarray(optima_by_n[n], dtype=float)
        if reps.ndim != 1 or reps.size < 30:
            raise ValueError(
                f"need at least 30 replications per sample size, got {reps.size} at N={n}"
            )
        stds.append(reps.std(ddof=1))
    stds = np.array(stds)
    if np.ptp(stds) == 0.0:
        return 0.0
    if np.any(stds <= 0.0):
        raise ValueError("replication spread is zero at some N; slope undefined")
    x = np.log(n_values)
    y = np.log(stds)
    x_dev = x - x.mean()
    return float(x_dev @ (y - y.mean()) / (x_dev @ x_dev))
