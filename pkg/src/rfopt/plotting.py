"""Figure rendering for the CLI reports.

All figures go straight to PNG files through the Agg backend; the Software
metadata chunk is stripped so that identical data produces identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KWARGS = {"dpi": 150, "metadata": {"Software": None}}


def _finish(fig, path: str):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_paths_figure(x: np.ndarray, paths: np.ndarray, path: str):
    """Line plot of sampled field realizations."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for i, row in enumerate(np.atleast_2d(paths)):
        ax.plot(x, row, lw=1.0, label=f"path {i + 1}")
    ax.set_xlabel("x")
    ax.set_ylabel("e(x)")
    if np.atleast_2d(paths).shape[0] <= 8:
        ax.legend(fontsize=8, frameon=False)
    _finish(fig, path)


def save_spectrum_figure(spectrum: np.ndarray, path: str):
    """Eigenvalue decay (log scale) with the cumulative scatter overlaid."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    modes = spectrum[:, 0]
    ax.semilogy(modes, np.maximum(spectrum[:, 1], 1e-300), "o-", ms=4)
    ax.set_xlabel("mode")
    ax.set_ylabel("eigenvalue")
    twin = ax.twinx()
    twin.plot(modes, spectrum[:, 2], "s--", color="tab:red", ms=3)
    twin.set_ylabel("cumulative scatter", color="tab:red")
    twin.set_ylim(0.0, 1.05)
    _finish(fig, path)


def save_gradcheck_figure(rel_err: np.ndarray, threshold: float, path: str):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    params = np.arange(1, rel_err.size + 1)
    ax.semilogy(params, np.maximum(rel_err, 1e-18), "o", ms=4)
    ax.axhline(threshold, color="tab:red", lw=1.0, ls="--")
    ax.set_xlabel("parameter")
    ax.set_ylabel("relative error vs finite differences")
    _finish(fig, path)


def save_optimum_figure(
    x: np.ndarray,
    sigma_hat: np.ndarray,
    sigma_true: np.ndarray,
    ci_low: np.ndarray,
    ci_high: np.ndarray,
    path: str,
):
    """Estimated field with its pointwise confidence band and, when known,
    the analytic optimum."""
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.fill_between(x, ci_low, ci_high, alpha=0.25, label="95% band")
    ax.plot(x, sigma_hat, lw=1.2, label="estimate")
    if np.all(np.isfinite(sigma_true)):
        ax.plot(x, sigma_true, "k--", lw=1.0, label="exact")
    ax.set_xlabel("x")
    ax.set_ylabel("sigma(x)")
    ax.legend(fontsize=8, frameon=False)
    _finish(fig, path)


def save_trace_figure(history: np.ndarray, path: str):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    ax1.plot(history[:, 0], history[:, 1], "o-", ms=3)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("objective")
    ax2.semilogy(history[:, 0], np.maximum(history[:, 3], 1e-18), "o-", ms=3)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("KKT residual")
    _finish(fig, path)


def save_histogram_figure(errors: np.ndarray, n_samples: int, path: str):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.hist(errors, bins=25, color="tab:blue", alpha=0.8)
    ax.set_xlabel("error at x = 0.5")
    ax.set_ylabel("count")
    ax.set_title(f"N = {n_samples}")
    _finish(fig, path)


def save_convergence_figure(
    n_values: np.ndarray, stds: np.ndarray, slope: float, path: str
):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.loglog(n_values, stds, "o", ms=5, label="replication std")
    anchor = stds[0] * (n_values / n_values[0]) ** slope
    ax.loglog(n_values, anchor, "--", lw=1.0, label=f"slope {slope:.3f}")
    ax.set_xlabel("samples N")
    ax.set_ylabel("std of optimum at x = 0.5")
    ax.legend(fontsize=8, frameon=False)
    _finish(fig, path)
