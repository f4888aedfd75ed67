"""Tolerance optimization over one-dimensional Gaussian random fields.

Submodules
    randomfield   covariance kernels and grids
    numerics      splines, quadrature, symmetric eigensolves
    kl            truncated Karhunen-Loeve bases and counter-based draws
    sensitivity   pathwise derivatives of sampled paths
    saa           fixed-draw sample-average objectives and inference
    sqp           dense SQP solver with BFGS curvature
    problems      the variance and budgeted-tolerance model problems
    cli           the ``rfopt`` experiment runner

This module deliberately imports nothing heavy: the command-line entry point
pins BLAS thread counts before the numeric stack loads, which only works if
importing the package itself stays free of numpy.
"""

from .errors import (
    BoundViolationError,
    CovarianceNotPSDError,
    DegenerateCovarianceError,
    DegenerateEigenvalueError,
    InfeasibleSubproblemError,
    InferenceError,
    NumericalDomainError,
    NumericalError,
    SingularModeError,
    UnsupportedConstraintError,
)

__version__ = "0.1.0"

__all__ = [
    "BoundViolationError",
    "CovarianceNotPSDError",
    "DegenerateCovarianceError",
    "DegenerateEigenvalueError",
    "InfeasibleSubproblemError",
    "InferenceError",
    "NumericalDomainError",
    "NumericalError",
    "SingularModeError",
    "UnsupportedConstraintError",
    "__version__",
]
