"""Tests for pathwise derivatives of Karhunen-Loeve realizations.

The eigen-route checks lean on two oracles: a frozen hand computation for a
2x2 diagonal family, and central finite differences through the full
rebuild-and-sample pipeline for random families.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rfopt.errors import NumericalDomainError, SingularModeError
from rfopt.kl import KLBasis, RealizationSet, build_kl, draw_realizations, sample_paths
from rfopt.sensitivity import (
    METHOD_EIGEN,
    METHOD_MEAN,
    METHOD_SCALED,
    EigenDerivatives,
    align_signs,
    covariance_path_sensitivity,
    eigen_derivatives,
    fixed_order_mean,
    mean_path_sensitivity,
    pathwise_gradient,
    scaled_path_sensitivity,
)
from rfopt.randomfield import CovarianceMatrix, Grid1D


def _spectrum_family(seed, n=6, scale=None):
    """Covariance with a chosen well-separated spectrum on a uniform grid,
    plus a random symmetric increment direction."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    lam = np.array([5.0, 3.0, 2.0, 1.5, 1.0, 0.5, 0.25, 0.1])[:n]
    grid = Grid1D.uniform(n)
    entries = n * (q * lam) @ q.T
    entries = (entries + entries.T) / 2.0
    direction = rng.normal(size=(n, n))
    direction = (direction + direction.T) / 2.0
    return grid, entries, direction


def test_mean_sensitivity_broadcasts_basis_column():
    basis_matrix = np.arange(12.0).reshape(4, 3)
    sens = mean_path_sensitivity(basis_matrix, param_index=1, n_samples=5)
    assert sens.method == METHOD_MEAN
    assert sens.parameter == 1
    assert sens.dpaths.shape == (5, 4)
    for row in sens.dpaths:
        assert_allclose(row, basis_matrix[:, 1])


def test_mean_sensitivity_validation():
    with pytest.raises(ValueError, match="out of range"):
        mean_path_sensitivity(np.ones((4, 3)), param_index=3, n_samples=2)
    with pytest.raises(ValueError, match="n_samples"):
        mean_path_sensitivity(np.ones((4, 3)), param_index=0, n_samples=0)


def test_eigen_derivatives_frozen_diagonal_family():
    # C(p) = diag(p, p^2) on two equally weighted points.  At p = 2 the
    # symmetrized matrix is diag(1, 2), so the sorted eigenvalues are (2, 1)
    # and hand differentiation gives dlambda = (2, 1/2) with no eigenvector
    # motion (the increment is diagonal too).
    grid = Grid1D.uniform(2)
    p = 2.0
    cov = CovarianceMatrix(np.diag([p, p**2]), grid)
    basis = build_kl(cov, n_modes=2)
    assert_allclose(basis.eigenvalues, [2.0, 1.0], rtol=1e-14)
    dcov = np.diag([1.0, 2.0 * p])
    derivs = eigen_derivatives(cov, basis, dcov)
    assert_allclose(derivs.dlambda, [2.0, 0.5], rtol=1e-13)
    assert_allclose(derivs.dmodes, 0.0, atol=1e-13)


def test_eigen_derivatives_match_finite_differences():
    grid, entries, direction = _spectrum_family(seed=31, n=6)
    k = 3
    cov = CovarianceMatrix(entries, grid)
    basis = build_kl(cov, n_modes=k)
    derivs = eigen_derivatives(cov, basis, direction)

    h = 1e-6
    plus = build_kl(CovarianceMatrix(entries + h * direction, grid), n_modes=k)
    minus = build_kl(CovarianceMatrix(entries - h * direction, grid), n_modes=k)
    fd_lambda = (plus.eigenvalues - minus.eigenvalues) / (2.0 * h)
    fd_modes = (
        align_signs(basis.modes, plus.modes) - align_signs(basis.modes, minus.modes)
    ) / (2.0 * h)
    assert_allclose(derivs.dlambda, fd_lambda, rtol=1e-6, atol=1e-8)
    assert_allclose(derivs.dmodes, fd_modes, rtol=0.0, atol=1e-5)


def test_eigen_derivatives_accept_precomputed_spectrum():
    from rfopt.numerics import sym_eigendecompose

    grid, entries, direction = _spectrum_family(seed=37, n=5)
    cov = CovarianceMatrix(entries, grid)
    basis = build_kl(cov, n_modes=2)
    w_sqrt = np.sqrt(grid.weights)
    spectrum = sym_eigendecompose(w_sqrt[:, None] * entries * w_sqrt[None, :])
    direct = eigen_derivatives(cov, basis, direction)
    shared = eigen_derivatives(cov, basis, direction, full_spectrum=spectrum)
    assert np.array_equal(direct.dlambda, shared.dlambda)
    assert np.array_equal(direct.dmodes, shared.dmodes)


def test_eigen_derivatives_reject_shape_mismatch():
    grid, entries, _ = _spectrum_family(seed=41, n=4)
    cov = CovarianceMatrix(entries, grid)
    basis = build_kl(cov, n_modes=2)
    with pytest.raises(ValueError, match="does not match grid"):
        eigen_derivatives(cov, basis, np.eye(3))


def test_align_signs_flips_negative_rows():
    reference = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    new = np.array([[-1.0, 0.1], [0.0, 1.0], [-0.5, -0.5]])
    aligned = align_signs(reference, new)
    assert_allclose(aligned[0], [1.0, -0.1])
    assert_allclose(aligned[1], [0.0, 1.0])
    assert_allclose(aligned[2], [0.5, 0.5])


def test_align_signs_keeps_orthogonal_rows():
    reference = np.array([[1.0, 0.0]])
    new = np.array([[0.0, 2.0]])
    assert_allclose(align_signs(reference, new), new)


def test_align_signs_is_idempotent():
    rng = np.random.default_rng(43)
    reference = rng.normal(size=(4, 6))
    new = rng.normal(size=(4, 6))
    once = align_signs(reference, new)
    assert np.array_equal(align_signs(reference, once), once)


def test_align_signs_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        align_signs(np.ones((2, 3)), np.ones((3, 2)))


def test_covariance_path_sensitivity_matches_pipeline_fd():
    # Oracle: finite differences of the realized paths through the full
    # rebuild (assemble, eigendecompose, fix signs, expand) with the rebuilt
    # modes aligned to the reference basis.
    grid, entries, direction = _spectrum_family(seed=47, n=6)
    k = 3
    cov = CovarianceMatrix(entries, grid)
    basis = build_kl(cov, n_modes=k)
    draws = draw_realizations(seed=5, n_samples=4, n_modes=k)
    derivs = eigen_derivatives(cov, basis, direction)
    sens = covariance_path_sensitivity(basis, derivs, draws)
    assert sens.method == METHOD_EIGEN

    h = 1e-6

    def paths_at(t):
        rebuilt = build_kl(CovarianceMatrix(entries + t * direction, grid), n_modes=k)
        aligned = KLBasis(
            eigenvalues=rebuilt.eigenvalues,
            modes=align_signs(basis.modes, rebuilt.modes),
            mean_field=rebuilt.mean_field,
            grid=rebuilt.grid,
            partial_scatter=rebuilt.partial_scatter,
            total_scatter=rebuilt.total_scatter,
        )
        return sample_paths(aligned, draws)

    fd = (paths_at(h) - paths_at(-h)) / (2.0 * h)
    assert_allclose(sens.dpaths, fd, rtol=0.0, atol=1e-5)


def _toy_basis(eigenvalues):
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    n = eigenvalues.size
    return KLBasis(
        eigenvalues=eigenvalues,
        modes=np.eye(n),
        mean_field=np.zeros(n),
        grid=Grid1D.uniform(n),
        partial_scatter=1.0,
        total_scatter=float(eigenvalues.sum()),
    )


def test_exactly_zero_retained_eigenvalue_raises():
    basis = _toy_basis([1.0, 0.0])
    derivs = EigenDerivatives(dlambda=np.ones(2), dmodes=np.zeros((2, 2)))
    draws = RealizationSet(np.ones((3, 2)), seed=0)
    with pytest.raises(SingularModeError, match="exactly zero"):
        covariance_path_sensitivity(basis, derivs, draws)


def test_negligible_modes_are_dropped():
    # The second eigenvalue sits below the drop floor; its (huge) derivative
    # must not contaminate the result.
    basis = _toy_basis([1.0, 1e-13])
    derivs = EigenDerivatives(dlambda=np.array([2.0, 1e6]), dmodes=np.zeros((2, 2)))
    draws = RealizationSet(np.array([[1.0, 5.0], [-2.0, 7.0]]), seed=0)
    sens = covariance_path_sensitivity(basis, derivs, draws)
    expected = np.outer(draws.draws[:, 0], basis.modes[0])
    assert_allclose(sens.dpaths, expected, rtol=0.0, atol=1e-15)


def test_covariance_path_sensitivity_rejects_mismatch():
    basis = _toy_basis([2.0, 1.0])
    derivs = EigenDerivatives(dlambda=np.ones(3), dmodes=np.zeros((3, 2)))
    draws = RealizationSet(np.ones((2, 2)), seed=0)
    with pytest.raises(ValueError, match="truncation level"):
        covariance_path_sensitivity(basis, derivs, draws)


def test_scaled_sensitivity_multiplies_basis_column():
    rng = np.random.default_rng(53)
    unit_paths = rng.normal(size=(4, 6))
    basis_matrix = rng.normal(size=(6, 3))
    sens = scaled_path_sensitivity(unit_paths, basis_matrix, param_index=2)
    assert sens.method == METHOD_SCALED
    assert_allclose(sens.dpaths, unit_paths * basis_matrix[:, 2])


def test_scaled_sensitivity_validation():
    with pytest.raises(ValueError, match="columns must match"):
        scaled_path_sensitivity(np.ones((2, 5)), np.ones((4, 3)), 0)
    with pytest.raises(ValueError, match="out of range"):
        scaled_path_sensitivity(np.ones((2, 4)), np.ones((4, 3)), 3)


def test_fixed_order_mean_is_permutation_invariant():
    rng = np.random.default_rng(59)
    values = rng.normal(size=5000) * 10.0 ** rng.integers(-8, 8, size=5000)
    shuffled = values[rng.permutation(values.size)]
    assert fixed_order_mean(values) == fixed_order_mean(shuffled)


def test_fixed_order_mean_matches_numpy_columnwise():
    rng = np.random.default_rng(61)
    values = rng.normal(size=(200, 4))
    assert_allclose(fixed_order_mean(values), values.mean(axis=0), atol=1e-14)
    assert fixed_order_mean(values[:, 0]) == pytest.approx(values[:, 0].mean())


def test_fixed_order_mean_rejects_3d():
    with pytest.raises(ValueError, match="1-d and 2-d"):
        fixed_order_mean(np.ones((2, 2, 2)))


def test_pathwise_gradient_is_the_sample_mean():
    values = np.array([1.0, 2.0, 4.0])
    assert pathwise_gradient(values) == pytest.approx(7.0 / 3.0)


def test_pathwise_gradient_names_bad_sample():
    values = np.array([1.0, np.nan, 2.0])
    with pytest.raises(NumericalDomainError, match="sample 1"):
        pathwise_gradient(values)
    with pytest.raises(ValueError, match="empty"):
        pathwise_gradient(np.array([]))


def test_eigen_derivatives_container_validation():
    with pytest.raises(ValueError, match="one row per eigenvalue"):
        EigenDerivatives(dlambda=np.ones(2), dmodes=np.zeros((3, 4)))
