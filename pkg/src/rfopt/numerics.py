"""Deterministic numerical kernels: B-spline fields, composite Gauss-Legendre
quadrature, and symmetric eigendecomposition helpers.

Everything here is pure and deterministic; the random-field machinery in the
rest of the package is built on these primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BSpline

from .errors import DegenerateEigenvalueError, NumericalDomainError

SPLINE_DEGREE = 3

# Relative floor under which an eigenvalue gap counts as a degeneracy.  Scaled
# by the largest eigenvalue of the matrix at hand.
GAP_FLOOR_FACTOR = 1e-10


def _clamped_uniform_knots(n_coefficients: int, degree: int = SPLINE_DEGREE) -> np.ndarray:
    interior = np.linspace(0.0, 1.0, n_coefficients - degree + 1)
    return np.concatenate([np.zeros(degree), interior, np.ones(degree)])


@dataclass
class SplineField:
    """Scalar field on [0, 1] in a clamped uniform cubic B-spline basis.

    The knot vector is open (endpoint multiplicity degree+1) with uniformly
    spaced interior knots, so the basis is a partition of unity and the field
    interpolates its first and last coefficients at the endpoints.
    """

    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.ndim != 1:
            raise ValueError("coefficients must be a 1-d array")
        if self.coefficients.size < SPLINE_DEGREE + 1:
            raise ValueError(
                f"need at least {SPLINE_DEGREE + 1} coefficients for a cubic "
                f"spline, got {self.coefficients.size}"
            )
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("coefficients must be finite")

    @property
    def n_coefficients(self) -> int:
        return self.coefficients.size

    @property
    def knots(self) -> np.ndarray:
        return _clamped_uniform_knots(self.n_coefficients)

    @property
    def greville_abscissae(self) -> np.ndarray:
        """Knot averages; coefficients sampled here reproduce linear fields."""
        t = self.knots
        k = SPLINE_DEGREE
        return np.array([t[i + 1:i + 1 + k].mean() for i in range(self.n_coefficients)])


def spline_basis_matrix(f: SplineField, points: np.ndarray) -> np.ndarray:
    """Dense basis matrix with rows indexing points and columns basis functions.

    Rows sum to one (partition of unity).  Points must lie in [0, 1].
    """
    points = np.atleast_1d(np.asarray(points, dtype=float))
    if points.size and (points.min() < 0.0 or points.max() > 1.0):
        bad = points[(points < 0.0) | (points > 1.0)][0]
        raise ValueError(f"point {bad!r} outside the spline domain [0, 1]")
    return BSpline.design_matrix(points, f.knots, SPLINE_DEGREE).toarray()


def spline_eval(f: SplineField, x) -> np.ndarray | float:
    """Evaluate the field at x (scalar or array) inside [0, 1]."""
    scalar = np.isscalar(x) or np.ndim(x) == 0
    values = spline_basis_matrix(f, np.atleast_1d(x)) @ f.coefficients
    return float(values[0]) if scalar else values


@dataclass
class QuadratureRule:
    """Composite Gauss-Legendre rule on [0, 1].

    ``intervals`` equal subintervals, each carrying a ``nodes_per_interval``
    point Gauss rule (exact for polynomials of degree 2*nodes_per_interval - 1
    per subinterval).
    """

    intervals: int
    nodes_per_interval: int
    nodes: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.intervals < 1:
            raise ValueError("intervals must be >= 1")
        if self.nodes_per_interval < 1:
            raise ValueError("nodes_per_interval must be >= 1")
        ref_x, ref_w = leggauss(self.nodes_per_interval)
        edges = np.linspace(0.0, 1.0, self.intervals + 1)
        h = 1.0 / self.intervals
        nodes = (edges[:-1, None] + h * (ref_x[None, :] + 1.0) / 2.0).ravel()
        weights = np.tile(ref_w * h / 2.0, self.intervals)
        self.nodes = nodes
        self.weights = weights

    @property
    def n_nodes(self) -> int:
        return self.nodes.size


def integrate(rule: QuadratureRule, f) -> float:
    """Apply the rule to a callable on [0, 1] or to values given at the nodes."""
    if callable(f):
        values = np.asarray(f(rule.nodes), dtype=float)
    else:
        values = np.asarray(f, dtype=float)
    if values.shape != rule.nodes.shape:
        raise ValueError(
            f"integrand has shape {values.shape}, expected {rule.nodes.shape}"
        )
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericalDomainError(
            f"integrand is not finite at node {bad[0]} (x = {rule.nodes[bad[0]]!r})"
        )
    return float(rule.weights @ values)


def sym_eigendecompose(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvector columns of a
    symmetric matrix.

    The input must be symmetric to within 1e-12 relative; the strict check
    protects the sensitivity formulas, which silently lose validity for
    non-symmetric input.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    scale = np.abs(matrix).max()
    asym = np.abs(matrix - matrix.T).max()
    if scale > 0 and asym > 1e-12 * scale:
        raise ValueError(
            f"matrix is not symmetric: max asymmetry {asym:.3e} "
            f"exceeds 1e-12 * {scale:.3e}"
        )
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    return eigenvalues[::-1].copy(), eigenvectors[:, ::-1].copy()


def spectral_pseudoinverse_apply(
    eigenvalues: np.ndarray,
    eigenvectors: np.ndarray,
    i: int,
    v: np.ndarray,
) -> np.ndarray:
    """Apply (M - lambda_i I)^+ to v using a full eigendecomposition of M.

    The pseudoinverse is the spectral sum over j != i of
    (lambda_j - lambda_i)^-1 phi_j (phi_j . v).  Any eigenvalue closer to
    lambda_i than GAP_FLOOR_FACTOR times the largest eigenvalue makes the
    inverse meaningless and raises DegenerateEigenvalueError.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    eigenvectors = np.asarray(eigenvectors, dtype=float)
    n = eigenvalues.size
    if not 0 <= i < n:
        raise ValueError(f"mode index {i} out of range for {n} eigenvalues")
    gaps = eigenvalues - eigenvalues[i]
    floor = GAP_FLOOR_FACTOR * np.abs(eigenvalues).max()
    for j in range(n):
        if j != i and abs(gaps[j]) <= floor:
            raise DegenerateEigenvalueError(i, j, abs(gaps[j]), floor)
    coeffs = eigenvectors.T @ np.asarray(v, dtype=float)
    coeffs[i] = 0.0
    inv_gaps = np.zeros(n)
    mask = np.arange(n) != i
    inv_gaps[mask] = 1.0 / gaps[mask]
    return eigenvectors @ (inv_gaps * coeffs)
