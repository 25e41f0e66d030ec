"""Exception types raised across the package."""


class LgrError(Exception):
    """Base class for all package errors."""


class RadiusTooLarge(LgrError, ValueError):
    pass


class EmptyInput(LgrError, ValueError):
    pass


class ZeroDistance(LgrError, ArithmeticError):
    pass


class Diverged(LgrError, RuntimeError):
    pass


class NotACube(LgrError, ValueError):
    pass


class BadMagic(LgrError, ValueError):
    pass


class VersionMismatch(LgrError, ValueError):
    pass


class TruncatedFile(LgrError, ValueError):
    pass


class InsufficientData(LgrError, ValueError):
    pass


class FrameOutOfRange(LgrError, IndexError):
    pass


class EmptySplit(LgrError, ValueError):
    pass


class ShapeMismatch(LgrError, ValueError):
    pass


class SpecMismatch(LgrError, ValueError):
    pass


class NotConverged(LgrError, RuntimeWarning):
    """Sinkhorn stopped at max_iter; carries the achieved marginal violation."""

    def __init__(self, message, violation=float("nan"), value=float("nan")):
        super().__init__(message)
        self.violation = violation
        self.value = value


class ConfigError(LgrError, ValueError):
    pass
