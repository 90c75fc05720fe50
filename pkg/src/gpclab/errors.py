"""Exception types raised across the package."""


class GpcLabError(Exception):
    """Base class for all package errors."""


class SingularConstraintSystem(GpcLabError):
    """The 3x3 constraint-force system C M^-1 C^T is numerically singular."""


class NotConverged(GpcLabError):
    """The OCP solver stopped without meeting its tolerances.

    ``u`` and ``report`` hold the best iterate found so the caller can still
    use it.
    """

    def __init__(self, message, u=None, report=None):
        super().__init__(message)
        self.u = u
        self.report = report


class NonFiniteCost(GpcLabError):
    """The rollout objective evaluated to NaN or infinity."""


class NotPositiveDefinite(GpcLabError):
    """Cholesky failed even after escalating the diagonal jitter to its cap."""


class DimensionMismatch(GpcLabError, ValueError):
    pass


class OrderViolation(GpcLabError):
    """An episode record was appended with a time not after the previous one."""


class EmptyAfterFiltering(GpcLabError):
    pass


class InsufficientData(GpcLabError):
    pass


class CatalogueSizeMismatch(GpcLabError, ValueError):
    pass
