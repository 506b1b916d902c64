"""Exception types shared across the package."""


class CBFError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(CBFError, ValueError):
    """An argument lies outside the admissible range."""


class DimensionError(CBFError, ValueError):
    """Fields defined on different grids were combined."""


class NumericalError(CBFError, RuntimeError):
    """A linear solve or projection did not meet its residual target."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class BlowUpError(NumericalError):
    """The time integration produced non-finite values."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class StabilityLimitError(NumericalError):
    """A run would violate the explicit step-size limits."""


class AdmissibilityError(CBFError, ValueError):
    """Inverse-problem data fail the solvability assumptions."""


class MarchingBreakdown(NumericalError):
    """The per-step scalar equation of the marching solver is degenerate."""


class CatalogError(CBFError, KeyError):
    """Unknown manufactured case name."""


class ConfigError(CBFError, ValueError):
    """Malformed or invalid run configuration."""
