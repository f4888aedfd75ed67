"""Karhunen-Loeve expansion of a Gaussian random field on a grid.

The continuous eigenproblem  int C(x, y) phi(y) dy = lambda phi(x)  is
discretized by Nystrom quadrature on the grid.  Writing W for the diagonal
weight matrix, the weight-symmetrized form

    W^(1/2) C W^(1/2) psi = lambda psi,      phi = W^(-1/2) psi

keeps the matrix symmetric, makes the modes orthonormal in the quadrature
inner product <f, g> = sum_g w_g f(x_g) g(x_g), and reproduces the grid
covariance exactly as sum_i lambda_i phi_i phi_i^T over the full spectrum.

Realizations use the truncated expansion

    e(x) = mean(x) + sum_{i<=k} sqrt(lambda_i) phi_i(x) xi_i

with iid standard normal xi.  Draws come from a counter-based generator keyed
by (seed, sample, mode), so the (n, i) entry never depends on how many samples
or modes are requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

from .errors import CovarianceNotPSDError, DegenerateCovarianceError
from .numerics import SplineField, spline_eval, sym_eigendecompose
from .randomfield import EIGENVALUE_CLAMP_FACTOR, CovarianceMatrix, Grid1D

_MAX_SEED = 2**64


@dataclass
class KLBasis:
    """Truncated K-L basis: eigenvalues descending, one mode per row.

    ``partial_scatter`` is the retained fraction of the total eigenvalue mass;
    ``total_scatter`` is that mass itself (the quadrature integral of the
    pointwise variance).
    """

    eigenvalues: np.ndarray
    modes: np.ndarray
    mean_field: np.ndarray
    grid: Grid1D
    partial_scatter: float
    total_scatter: float

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float)
        self.modes = np.asarray(self.modes, dtype=float)
        self.mean_field = np.asarray(self.mean_field, dtype=float)
        if self.eigenvalues.ndim != 1:
            raise ValueError("eigenvalues must be 1-d")
        if np.any(self.eigenvalues < 0.0):
            raise ValueError("eigenvalues must be nonnegative")
        if np.any(np.diff(self.eigenvalues) > 0.0):
            raise ValueError("eigenvalues must be in descending order")
        k, g = self.modes.shape
        if k != self.eigenvalues.size or g != self.grid.n_points:
            raise ValueError(
                f"modes shape {self.modes.shape} does not match "
                f"{self.eigenvalues.size} eigenvalues on {self.grid.n_points} points"
            )
        if self.mean_field.shape != (g,):
            raise ValueError("mean_field must hold one value per grid point")
        if not 0.0 < self.partial_scatter <= 1.0:
            raise ValueError("partial_scatter must lie in (0, 1]")

    @property
    def truncation_level(self) -> int:
        return self.eigenvalues.size

    def spectrum(self) -> np.ndarray:
        """Rows (mode, eigenvalue, cumulative scatter) for the retained modes."""
        cum = np.cumsum(self.eigenvalues) / self.total_scatter
        return np.column_stack(
            [np.arange(1, self.truncation_level + 1), self.eigenvalues, cum]
        )


@dataclass
class RealizationSet:
    """A fixed matrix of standard normal draws, one sample per row."""

    draws: np.ndarray
    seed: int

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 2:
            raise ValueError("draws must be a 2-d array (samples x modes)")

    @property
    def n_samples(self) -> int:
        return self.draws.shape[0]

    @property
    def n_modes(self) -> int:
        return self.draws.shape[1]


def _fixed_sign(modes: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive.

    Ties resolve to the lowest index via argmax, making the convention
    deterministic.
    """
    idx = np.abs(modes).argmax(axis=1)
    signs = np.sign(modes[np.arange(modes.shape[0]), idx])
    signs[signs == 0.0] = 1.0
    return modes * signs[:, None]


def build_kl(
    cov: CovarianceMatrix,
    mean: SplineField | None = None,
    threshold: float = 0.99,
    n_modes: int | None = None,
) -> KLBasis:
    """Build the truncated K-L basis of a covariance matrix.

    Truncation keeps the smallest k whose partial scatter
    S_k = sum_{i<=k} lambda_i / sum_i lambda_i reaches ``threshold``; passing
    ``n_modes`` instead pins the count directly (used to keep a fixed draw
    matrix consistent while the covariance changes during optimization).

    Eigenvalues more negative than the PSD rounding floor raise
    CovarianceNotPSDError; tiny negatives are clamped to zero.
    """
    if n_modes is None:
        if not 0.0 < threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
    elif n_modes < 1:
        raise ValueError("n_modes must be >= 1")

    grid = cov.grid
    w_sqrt = np.sqrt(grid.weights)
    sym = w_sqrt[:, None] * cov.entries * w_sqrt[None, :]
    eigenvalues, vectors = sym_eigendecompose(sym)

    lam_max = eigenvalues[0]
    if lam_max <= 0.0:
        if np.all(np.abs(eigenvalues) <= 0.0):
            raise DegenerateCovarianceError("covariance spectrum is identically zero")
    floor = -EIGENVALUE_CLAMP_FACTOR * abs(lam_max)
    worst = eigenvalues[-1]
    if worst < floor:
        raise CovarianceNotPSDError(
            f"eigenvalue {worst:.6e} below the PSD rounding floor {floor:.6e}; "
            "the kernel is not positive semidefinite on this grid"
        )
    eigenvalues = np.clip(eigenvalues, 0.0, None)

    total = float(eigenvalues.sum())
    if total <= 0.0:
        raise DegenerateCovarianceError("covariance spectrum is identically zero")

    if n_modes is None:
        scatter = np.cumsum(eigenvalues) / total
        k = int(np.searchsorted(scatter, threshold) + 1)
        k = min(k, eigenvalues.size)
    else:
        if n_modes > eigenvalues.size:
            raise ValueError(
                f"n_modes {n_modes} exceeds the grid spectrum size {eigenvalues.size}"
            )
        k = n_modes

    modes = _fixed_sign((vectors[:, :k] / w_sqrt[:, None]).T)
    mean_field = (
        np.zeros(grid.n_points) if mean is None else spline_eval(mean, grid.points)
    )
    return KLBasis(
        eigenvalues=eigenvalues[:k],
        modes=modes,
        mean_field=mean_field,
        grid=grid,
        partial_scatter=float(eigenvalues[:k].sum() / total),
        total_scatter=total,
    )


def sample_paths(basis: KLBasis, draws: RealizationSet) -> np.ndarray:
    """Realize paths on the grid, one row per sample."""
    if draws.n_modes != basis.truncation_level:
        raise ValueError(
            f"draws have {draws.n_modes} modes, basis retains {basis.truncation_level}"
        )
    scaled = draws.draws * np.sqrt(basis.eigenvalues)
    return basis.mean_field + scaled @ basis.modes


def draw_realizations(seed: int, n_samples: int, n_modes: int) -> RealizationSet:
    """Standard normal draws from a counter-based stream keyed by (seed, n, i).

    Entry (n, i) is the inverse normal CDF of a uniform built from the i-th
    64-bit word of a Philox stream whose counter block is private to sample n.
    The value of any entry is therefore independent of n_samples, n_modes, and
    evaluation order, which is what makes fixed-draw objectives reproducible
    bit for bit.
    """
    if not 0 <= seed < _MAX_SEED:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    if n_samples < 1 or n_modes < 1:
        raise ValueError("n_samples and n_modes must be >= 1")
    raw = np.empty((n_samples, n_modes), dtype=np.uint64)
    for n in range(n_samples):
        raw[n] = Philox(key=seed, counter=n << 64).random_raw(n_modes)
    uniforms = ((raw >> np.uint64(11)) + np.float64(0.5)) * 2.0**-53
    return RealizationSet(draws=ndtri(uniforms), seed=seed)
