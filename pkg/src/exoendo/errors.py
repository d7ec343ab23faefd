"""Exception types shared across the package."""


class ExoEndoError(Exception):
    """Base class for all package errors."""


class DimensionError(ExoEndoError, ValueError):
    """Array shapes or sample counts are incompatible."""


class NumericError(ExoEndoError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class SingularityError(ExoEndoError, ArithmeticError):
    """A regularized matrix could not be factorized."""


class RetractionError(ExoEndoError, ArithmeticError):
    """The QR retraction met a rank-deficient matrix."""


class DomainError(ExoEndoError, ValueError):
    """An argument lies outside its admissible domain."""


class ConfigError(ExoEndoError, ValueError):
    """An experiment or environment configuration is invalid."""


class CapacityError(ExoEndoError, ValueError):
    """A problem is too large for exhaustive enumeration."""


class StructureError(ExoEndoError, ValueError):
    """A graph template violates its structural requirements."""
