"""Pathwise derivatives of Karhunen-Loeve realizations.

For a fixed draw matrix xi, a realization e(x) = mean(x) + sum_i sqrt(lambda_i)
phi_i(x) xi_i is a deterministic function of the field parameters, so the
derivative of a path with respect to a parameter p decomposes by route:

* mean parameters: d e / d p_m = d mean / d p_m, independent of the sample;
* general covariance parameters, through the eigenpairs:
      d e / d p_c = sum_i [ phi_i dlambda_i / (2 sqrt(lambda_i))
                            + sqrt(lambda_i) dphi_i ] xi_i,
  with first-order eigenvalue/eigenvector perturbations
      dlambda_i = psi_i . dA psi_i,
      dpsi_i    = -(A - lambda_i I)^+ dA psi_i,
  in the weight-symmetrized problem A = W^(1/2) C W^(1/2);
* a separable scale sigma(x) with unit-variance factor field, where
  e = sigma * e_unit gives  d e / d sigma_k = e_unit * B_k  directly.

Eigenvector perturbation requires simple eigenvalues; a collision within the
relative gap floor raises DegenerateEigenvalueError rather than returning
garbage.  Because eigenvectors are only defined up to sign, rebuilt bases are
re-aligned against a reference before their derivatives are compared or
differenced (align_signs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalDomainError, SingularModeError
from .kl import KLBasis, RealizationSet
from .numerics import spectral_pseudoinverse_apply, sym_eigendecompose
from .randomfield import CovarianceMatrix

# Modes with eigenvalues below this factor times the leading eigenvalue carry
# no usable 1/sqrt(lambda) sensitivity signal and are dropped from the sums.
MODE_DROP_FACTOR = 1e-12

METHOD_MEAN = "mean-shift"
METHOD_EIGEN = "eigen"
METHOD_SCALED = "scaled"


@dataclass
class EigenDerivatives:
    """Derivatives of the retained eigenpairs w.r.t. one covariance parameter."""

    dlambda: np.ndarray
    dmodes: np.ndarray

    def __post_init__(self):
        self.dlambda = np.asarray(self.dlambda, dtype=float)
        self.dmodes = np.asarray(self.dmodes, dtype=float)
        if self.dlambda.ndim != 1 or self.dmodes.ndim != 2:
            raise ValueError("dlambda must be 1-d and dmodes 2-d")
        if self.dmodes.shape[0] != self.dlambda.size:
            raise ValueError("dmodes must hold one row per eigenvalue")


@dataclass
class PathSensitivities:
    """Per-sample path derivatives w.r.t. a single parameter (rows = samples)."""

    dpaths: np.ndarray
    parameter: int
    method: str

    def __post_init__(self):
        self.dpaths = np.asarray(self.dpaths, dtype=float)
        if self.dpaths.ndim != 2:
            raise ValueError("dpaths must be 2-d (samples x grid points)")


def mean_path_sensitivity(
    basis_matrix: np.ndarray, param_index: int, n_samples: int
) -> PathSensitivities:
    """Sensitivity to a mean coefficient: every sample moves by the basis
    function, so each row is basis_matrix[:, param_index]."""
    basis_matrix = np.asarray(basis_matrix, dtype=float)
    if not 0 <= param_index < basis_matrix.shape[1]:
        raise ValueError(f"param_index {param_index} out of range")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    row = basis_matrix[:, param_index]
    return PathSensitivities(
        dpaths=np.broadcast_to(row, (n_samples, row.size)).copy(),
        parameter=param_index,
        method=METHOD_MEAN,
    )


def eigen_derivatives(
    cov: CovarianceMatrix,
    basis: KLBasis,
    dcov: np.ndarray,
    full_spectrum: tuple[np.ndarray, np.ndarray] | None = None,
) -> EigenDerivatives:
    """First-order perturbation of the retained eigenpairs for a covariance
    increment dcov (same grid as cov).

    ``full_spectrum`` may carry a precomputed eigendecomposition of the
    weight-symmetrized matrix (as returned by sym_eigendecompose) to avoid
    repeating it per parameter; it must come from exactly this covariance.
    """
    dcov = np.asarray(dcov, dtype=float)
    n = cov.grid.n_points
    if dcov.shape != (n, n):
        raise ValueError(f"dcov shape {dcov.shape} does not match grid size {n}")
    w_sqrt = np.sqrt(cov.grid.weights)
    d_sym = w_sqrt[:, None] * dcov * w_sqrt[None, :]
    if full_spectrum is None:
        sym = w_sqrt[:, None] * cov.entries * w_sqrt[None, :]
        full_spectrum = sym_eigendecompose(sym)
    lam_full, vec_full = full_spectrum

    k = basis.truncation_level
    psi = basis.modes * w_sqrt  # rows are the symmetrized eigenvectors
    dlambda = np.empty(k)
    dmodes = np.empty_like(basis.modes)
    for i in range(k):
        v = d_sym @ psi[i]
        dlambda[i] = psi[i] @ v
        dpsi = -spectral_pseudoinverse_apply(lam_full, vec_full, i, v)
        dmodes[i] = dpsi / w_sqrt
    return EigenDerivatives(dlambda=dlambda, dmodes=dmodes)


def align_signs(reference_modes: np.ndarray, new_modes: np.ndarray) -> np.ndarray:
    """Flip rows of new_modes that point away from the reference.

    A row flips when ||new + ref|| < ||new - ref||, i.e. when its inner
    product with the reference row is negative; an exact tie keeps the
    current sign.  Applying the function twice is a no-op.
    """
    reference_modes = np.asarray(reference_modes, dtype=float)
    new_modes = np.asarray(new_modes, dtype=float)
    if reference_modes.shape != new_modes.shape:
        raise ValueError(
            f"mode shapes differ: {reference_modes.shape} vs {new_modes.shape}"
        )
    dots = np.einsum("ij,ij->i", reference_modes, new_modes)
    signs = np.where(dots < 0.0, -1.0, 1.0)
    return new_modes * signs[:, None]


def covariance_path_sensitivity(
    basis: KLBasis, derivs: EigenDerivatives, draws: RealizationSet
) -> PathSensitivities:
    """Per-sample path derivative for a general covariance parameter.

    Row n is sum over retained modes i of
        [ phi_i dlambda_i / (2 sqrt(lambda_i)) + sqrt(lambda_i) dphi_i ] xi_ni.
    Modes whose eigenvalue sits below MODE_DROP_FACTOR times the leading one
    are dropped from the sum; an exactly zero retained eigenvalue is an error
    because the dlambda term divides by sqrt(lambda).
    """
    k = basis.truncation_level
    if derivs.dlambda.size != k or draws.n_modes != k:
        raise ValueError(
            "eigen derivatives and draws must match the basis truncation level"
        )
    lam = basis.eigenvalues
    if np.any(lam == 0.0):
        i = int(np.flatnonzero(lam == 0.0)[0])
        raise SingularModeError(
            f"retained eigenvalue {i} is exactly zero; its path sensitivity "
            "is undefined"
        )
    keep = lam >= MODE_DROP_FACTOR * lam[0]
    sqrt_lam = np.sqrt(lam[keep])
    # (k_kept, G) rows of d(sqrt(lambda_i) phi_i)/dp
    dterm = (
        basis.modes[keep] * (derivs.dlambda[keep] / (2.0 * sqrt_lam))[:, None]
        + derivs.dmodes[keep] * sqrt_lam[:, None]
    )
    return PathSensitivities(
        dpaths=draws.draws[:, keep] @ dterm,
        parameter=-1,
        method=METHOD_EIGEN,
    )


def scaled_path_sensitivity(
    unit_paths: np.ndarray, basis_matrix: np.ndarray, param_index: int
) -> PathSensitivities:
    """Sensitivity for a separable scale field: with e = sigma * e_unit and
    sigma = sum_k c_k B_k, each row is e_unit(x) * B_k(x)."""
    unit_paths = np.asarray(unit_paths, dtype=float)
    basis_matrix = np.asarray(basis_matrix, dtype=float)
    if unit_paths.ndim != 2 or unit_paths.shape[1] != basis_matrix.shape[0]:
        raise ValueError("unit_paths columns must match basis_matrix rows")
    if not 0 <= param_index < basis_matrix.shape[1]:
        raise ValueError(f"param_index {param_index} out of range")
    return PathSensitivities(
        dpaths=unit_paths * basis_matrix[:, param_index],
        parameter=param_index,
        method=METHOD_SCALED,
    )


def fixed_order_mean(values: np.ndarray, axis: int = 0) -> np.ndarray | float:
    """Exactly rounded mean (math.fsum), column by column for 2-d input.

    fsum accumulates the exact sum before a single rounding, so the result is
    independent of summation order and of how work is scheduled; this is the
    reduction behind every Monte Carlo average in the package.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return math.fsum(values) / values.size
    if values.ndim == 2:
        n = values.shape[axis]
        cols = values.T if axis == 0 else values
        return np.array([math.fsum(col) for col in cols]) / n
    raise ValueError("fixed_order_mean supports 1-d and 2-d arrays")


def pathwise_gradient(per_sample_df: np.ndarray) -> float:
    """Monte Carlo pathwise derivative: the mean of per-sample derivatives.

    Entries must be finite; the first offender is named because a silent NaN
    here poisons the optimizer many steps later.
    """
    per_sample_df = np.asarray(per_sample_df, dtype=float)
    if per_sample_df.ndim != 1:
        raise ValueError("per_sample_df must be 1-d (one value per sample)")
    if per_sample_df.size == 0:
        raise ValueError("per_sample_df is empty")
    bad = np.flatnonzero(~np.isfinite(per_sample_df))
    if bad.size:
        raise NumericalDomainError(
            f"per-sample derivative is not finite at sample {bad[0]}"
        )
    return float(fixed_order_mean(per_sample_df))
