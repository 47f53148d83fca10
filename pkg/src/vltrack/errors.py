"""Exception types shared across the package."""


class VltError(Exception):
    """Base class for all package errors."""


class ShapeError(VltError, ValueError):
    pass


class DTypeError(VltError, TypeError):
    pass


class RankError(VltError, ValueError):
    pass


class TapeError(VltError, RuntimeError):
    pass


class NumericError(VltError, ArithmeticError):
    pass


class DomainError(VltError, ValueError):
    pass


class LayoutError(VltError, ValueError):
    pass


class FormatError(VltError, ValueError):
    pass


class ConfigError(VltError, ValueError):
    pass


class ModeError(VltError, ValueError):
    pass


class EmptySplitError(VltError, ValueError):
    pass
