"""Exception types raised across the package."""


class TTTError(Exception):
    """Base class for all errors raised by ttt_linattn."""


class ShapeMismatch(TTTError, ValueError):
    pass


class ZeroGradient(TTTError, ValueError):
    pass


class ScheduleLengthMismatch(TTTError, ValueError):
    pass


class IndexOrder(TTTError, ValueError):
    pass


class IncompatibleMode(TTTError, ValueError):
    pass


class UnsupportedConfig(TTTError, ValueError):
    pass


class BadVariant(TTTError, ValueError):
    pass


class UnknownSuite(TTTError, KeyError):
    pass


class IoFailure(TTTError, OSError):
    pass


class EquivalenceError(TTTError, AssertionError):
    """A closed form disagreed with the network it is supposed to reproduce."""
