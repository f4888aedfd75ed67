"""Covariance kernels for one-dimensional Gaussian random fields on [0, 1].

Three kernel families are supported:

* ``squared-exponential``: rho(x1, x2) = exp(-(x1 - x2)^2 / (2 L^2)), smooth
  paths, unit variance.
* ``exponential``: rho(x1, x2) = exp(-|x1 - x2| / L), rough paths, unit
  variance.  Kept for qualitative sampling comparisons only; it is excluded
  from the differentiable-sensitivity machinery.
* ``scaled-nonstationary``: C(x1, x2) = sigma(x1) sigma(x2) rho(x1, x2) with a
  squared-exponential rho and a spline scale field sigma.

Parameter derivatives of the covariance matrix are closed-form: index 0 is
the correlation length, indices 1..n are the scale-field spline coefficients
(scaled kind only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import QuadratureRule, SplineField, spline_basis_matrix

KIND_SQUARED_EXPONENTIAL = "squared-exponential"
KIND_EXPONENTIAL = "exponential"
KIND_SCALED = "scaled-nonstationary"
_KINDS = (KIND_SQUARED_EXPONENTIAL, KIND_EXPONENTIAL, KIND_SCALED)

# Eigenvalues of an assembled covariance more negative than this factor times
# the largest eigenvalue mean the kernel is not PSD on the grid; smaller
# negatives are floating-point noise and are clamped to zero.
EIGENVALUE_CLAMP_FACTOR = 1e-10


@dataclass
class Grid1D:
    """Strictly increasing points in [0, 1] with positive quadrature weights
    summing to one."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.points.ndim != 1 or self.points.shape != self.weights.shape:
            raise ValueError("points and weights must be 1-d arrays of equal length")
        if self.points.size < 2:
            raise ValueError("a grid needs at least two points")
        if self.points.min() < 0.0 or self.points.max() > 1.0:
            raise ValueError("grid points must lie in [0, 1]")
        if np.any(np.diff(self.points) <= 0.0):
            raise ValueError("grid points must be strictly increasing")
        if np.any(self.weights <= 0.0):
            raise ValueError("grid weights must be positive")
        total = self.weights.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"grid weights sum to {total!r}, expected 1")

    @property
    def n_points(self) -> int:
        return self.points.size

    @classmethod
    def uniform(cls, n_points: int) -> "Grid1D":
        """n equally spaced points with equal weights 1/n."""
        if n_points < 2:
            raise ValueError("need at least two points")
        return cls(np.linspace(0.0, 1.0, n_points), np.full(n_points, 1.0 / n_points))

    @classmethod
    def from_quadrature(cls, rule: QuadratureRule) -> "Grid1D":
        """Grid at the quadrature nodes, weighted by the quadrature weights."""
        return cls(rule.nodes.copy(), rule.weights.copy())


@dataclass
class CovarianceModel:
    kind: str
    correlation_length: float
    scale_field: SplineField | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {_KINDS}")
        if not np.isfinite(self.correlation_length) or self.correlation_length <= 0.0:
            raise ValueError("correlation_length must be positive and finite")
        if self.kind == KIND_SCALED and self.scale_field is None:
            raise ValueError("scaled-nonstationary kernels need a scale_field")
        if self.kind != KIND_SCALED and self.scale_field is not None:
            raise ValueError(f"kind {self.kind!r} does not take a scale_field")


@dataclass
class CovarianceMatrix:
    """Kernel evaluated on a grid; entries[i, j] = C(points[i], points[j])."""

    entries: np.ndarray
    grid: Grid1D

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        n = self.grid.n_points
        if self.entries.shape != (n, n):
            raise ValueError(
                f"entries shape {self.entries.shape} does not match grid size {n}"
            )
        scale = np.abs(self.entries).max()
        asym = np.abs(self.entries - self.entries.T).max()
        if scale > 0 and asym > 1e-14 * scale:
            raise ValueError(f"covariance entries asymmetric by {asym:.3e}")


def param_names(model: CovarianceModel) -> list[str]:
    """Differentiable parameters: correlation length, then scale coefficients."""
    names = ["correlation_length"]
    if model.kind == KIND_SCALED:
        names += [f"sigma_{k}" for k in range(model.scale_field.n_coefficients)]
    return names


def _correlation(model: CovarianceModel, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    d = x1 - x2
    L = model.correlation_length
    if model.kind == KIND_EXPONENTIAL:
        return np.exp(-np.abs(d) / L)
    return np.exp(-(d * d) / (2.0 * L * L))


def _check_domain(x: np.ndarray, name: str):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")


def eval_kernel(model: CovarianceModel, x1, x2):
    """Evaluate C(x1, x2) pointwise (broadcasting over array arguments)."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    _check_domain(x1, "x1")
    _check_domain(x2, "x2")
    rho = _correlation(model, x1, x2)
    if model.kind == KIND_SCALED:
        f = model.scale_field
        basis = spline_basis_matrix
        s1 = basis(f, x1.ravel()).reshape(x1.shape + (-1,)) @ f.coefficients
        s2 = basis(f, x2.ravel()).reshape(x2.shape + (-1,)) @ f.coefficients
        rho = s1 * s2 * rho
    if rho.ndim == 0:
        return float(rho)
    return rho


def assemble_covariance(model: CovarianceModel, grid: Grid1D) -> CovarianceMatrix:
    """Covariance matrix on the grid.

    Assembly is exactly symmetric: the correlation part depends on the
    squared/absolute distance and the scale enters as an outer product.
    """
    x = grid.points
    rho = _correlation(model, x[:, None], x[None, :])
    if model.kind == KIND_SCALED:
        sigma = spline_basis_matrix(model.scale_field, x) @ model.scale_field.coefficients
        rho = np.outer(sigma, sigma) * rho
    return CovarianceMatrix(rho, grid)


def covariance_param_derivative(
    model: CovarianceModel, grid: Grid1D, param_index: int
) -> np.ndarray:
    """Entrywise derivative of the covariance matrix w.r.t. one parameter.

    Index 0 is the correlation length; for the scaled kind, index 1 + k is the
    k-th scale-field coefficient with

        dC_ij / dsigma_k = [B_k(x_i) sigma(x_j) + sigma(x_i) B_k(x_j)] rho_ij.

    The exponential kernel has no differentiable sensitivity support.
    """
    if model.kind == KIND_EXPONENTIAL:
        raise ValueError(
            "the exponential kernel is excluded from sensitivity operations"
        )
    names = param_names(model)
    if not 0 <= param_index < len(names):
        raise ValueError(
            f"param_index {param_index} out of range; model has {len(names)} "
            f"parameters ({names[0]}..{names[-1]})"
        )
    x = grid.points
    L = model.correlation_length
    rho = _correlation(model, x[:, None], x[None, :])
    if param_index == 0:
        dsq = (x[:, None] - x[None, :]) ** 2
        drho = rho * dsq / L**3
        if model.kind == KIND_SCALED:
            f = model.scale_field
            sigma = spline_basis_matrix(f, x) @ f.coefficients
            return np.outer(sigma, sigma) * drho
        return drho
    f = model.scale_field
    basis = spline_basis_matrix(f, x)
    sigma = basis @ f.coefficients
    bk = basis[:, param_index - 1]
    return (np.outer(bk, sigma) + np.outer(sigma, bk)) * rho
