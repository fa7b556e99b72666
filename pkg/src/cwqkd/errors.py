"""Exception types raised across the package."""


class CWQKDError(Exception):
    """Base class for all package errors."""


class SchemaError(CWQKDError, ValueError):
    """A JSON document does not match the expected schema.

    ``field`` names the offending key so callers can report it.
    """

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NoSignalError(CWQKDError, ArithmeticError):
    """QBER requested while no coincidences are measured (CC^m == 0)."""


class ZeroKeyError(CWQKDError):
    """No operating point in the search domain yields a positive key.

    ``best`` carries the least-bad point found (lowest QBER), if any.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class TruncationError(CWQKDError):
    """A Poisson series could not be truncated within the allowed order."""


class EventGuardError(CWQKDError):
    """A simulation request exceeds the configured event budget."""


class NoPeakError(CWQKDError):
    """A histogram shows no usable correlation peak."""


class InsufficientDataError(CWQKDError):
    """Too few events to resolve the requested quantity."""
