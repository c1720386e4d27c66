"""Exception hierarchy shared by every module of the lab."""


class NikodymError(Exception):
    """Base class for all errors raised by the package."""


class ChartDomainError(NikodymError, ValueError):
    """A point lies outside the coordinate chart, or a domain is empty."""


class NumericError(NikodymError, ArithmeticError):
    """A coefficient or field evaluation produced non-finite values."""


class ConstructionError(NikodymError, ValueError):
    """A model or profile cannot be built with the requested parameters."""


class UnsupportedModelError(NikodymError, TypeError):
    """The operation needs capabilities the model does not expose."""


class EmptyTrajectoryError(NikodymError):
    """The geodesic left the chart before completing a single step."""


class IntegratorInstabilityError(NikodymError):
    """Energy drift exceeded the tolerance; a smaller step is needed."""


class UsageError(NikodymError, ValueError):
    """Inputs are inconsistent with each other (e.g. model vs trajectory)."""


class SingularityError(NikodymError):
    """A matrix became numerically singular along the integration grid."""

    def __init__(self, message, s=None):
        super().__init__(message)
        self.s = s


class DivergenceError(NikodymError):
    """Newton iteration failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class IllConditionedError(NikodymError):
    """A Jacobian is too ill-conditioned to invert reliably."""


class ResolutionError(NikodymError, ValueError):
    """A grid is too coarse to resolve the requested feature."""

    def __init__(self, message, min_resolution=None):
        super().__init__(message)
        self.min_resolution = min_resolution


class InsufficientDataError(NikodymError, ValueError):
    """Too few data points for a regression."""


class ConfigError(NikodymError, ValueError):
    """Malformed or out-of-range experiment configuration."""
