"""Exception types shared across the package."""


class MSVSRError(Exception):
    """Base class for all package errors."""


class NotFound(MSVSRError, FileNotFoundError):
    pass


class ShapeMismatch(MSVSRError, ValueError):
    pass


class EmptyDataset(MSVSRError, ValueError):
    pass


class InvalidDataset(MSVSRError, ValueError):
    pass


class InvariantViolation(MSVSRError, ValueError):
    pass


class InvalidArgument(MSVSRError, ValueError):
    pass


class InvalidState(MSVSRError, RuntimeError):
    pass


class ConfigError(MSVSRError, ValueError):
    pass


class NumericalDivergence(MSVSRError, ArithmeticError):
    pass


class ChecksumMismatch(MSVSRError, IOError):
    pass


class VersionError(MSVSRError, IOError):
    pass
