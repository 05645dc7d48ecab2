"""Exception types raised across the package."""


class AbstraktError(Exception):
    """Base class for all package errors."""


class DimensionError(AbstraktError, ValueError):
    """Raised when array shapes are inconsistent."""


class NonFiniteError(AbstraktError, ValueError):
    """Raised when an input or intermediate value is NaN or infinite."""


class RankError(AbstraktError, ValueError):
    """Raised when a matrix that must have full rank does not."""


class InfeasibleError(AbstraktError):
    """Raised when an optimization or search has no admissible solution.

    ``diagnosis`` carries a short machine-readable reason, e.g. the failing
    null-space condition when no relaxation matrix can exist.
    """

    def __init__(self, message, diagnosis=None):
        super().__init__(message)
        self.diagnosis = diagnosis


class ConditionError(AbstraktError):
    """Raised when a sufficient condition for a certificate fails.

    Attributes
    ----------
    condition : str
        Name of the violated condition.
    worst_point : ndarray or None
        Sample at which the violation is largest.
    violation : float
        Size of the violation at ``worst_point``.
    """

    def __init__(self, condition, message, worst_point=None, violation=float("nan")):
        super().__init__(f"{condition}: {message}")
        self.condition = condition
        self.worst_point = worst_point
        self.violation = violation


class GuardError(AbstraktError):
    """Raised when a runtime safety guard trips during simulation."""
