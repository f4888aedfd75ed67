"""Exception types shared across the package.

Validation problems raise plain ``ValueError``; everything that can only be
detected mid-computation derives from :class:`NumericalError` so callers (and
the CLI exit-code mapping) can tell the two apart.
"""


class NumericalError(RuntimeError):
    """A computation failed for numerical reasons despite valid inputs."""


class NumericalDomainError(NumericalError):
    """A quantity left its valid domain (non-finite value, named location)."""


class CovarianceNotPSDError(NumericalError):
    """Covariance matrix has a negative eigenvalue beyond the rounding floor."""


class DegenerateCovarianceError(NumericalError):
    """Covariance spectrum is identically zero; no truncation level exists."""


class DegenerateEigenvalueError(NumericalError):
    """Two eigenvalues are too close for eigenvector perturbation to be defined."""

    def __init__(self, i: int, j: int, gap: float, floor: float):
        self.mode_i = i
        self.mode_j = j
        self.gap = gap
        self.floor = floor
        super().__init__(
            f"eigenvalues {i} and {j} are degenerate: |gap| = {gap:.3e} "
            f"<= floor {floor:.3e}; eigenvector derivatives are undefined"
        )


class SingularModeError(NumericalError):
    """A retained K-L eigenvalue is exactly zero where 1/sqrt(lambda) is needed."""


class BoundViolationError(NumericalError):
    """A field dropped below its required lower bound at a quadrature node."""


class InferenceError(NumericalError):
    """The estimated Hessian is singular; standard errors are undefined."""


class InfeasibleSubproblemError(NumericalError):
    """QP constraints are inconsistent or define an empty feasible set."""


class UnsupportedConstraintError(ValueError):
    """The optimization spec declares constraints the solver does not handle."""
