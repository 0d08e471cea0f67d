"""Exception hierarchy shared across the package."""


class RiderError(Exception):
    """Base class for all errors raised by :mod:`rider`."""


class ParseError(RiderError):
    pass


class AlphabetError(RiderError, ValueError):
    pass


class ShapeError(RiderError, ValueError):
    pass


class GraphError(RiderError):
    pass


class ConfigError(RiderError, ValueError):
    pass


class RangeError(RiderError, ValueError):
    pass


class StateError(RiderError):
    pass


class OracleError(RiderError):
    """A folding oracle failed to produce a structure for a sequence."""

    def __init__(self, message, kind="error", stderr=""):
        super().__init__(message)
        self.kind = kind
        self.stderr = stderr


class BatchError(RiderError):
    pass


class UpdateError(RiderError):
    pass
