class BnasError(Exception):
    """Base class for all package errors."""


class ShapeError(BnasError):
    """Tensor shapes are inconsistent with an operation's contract."""


class NumericsError(BnasError):
    """Non-finite values appeared where finite ones are required."""


class UsageError(BnasError):
    """An operation was invoked out of order (e.g. backward before forward)."""


class CheckpointError(BnasError):
    """A checkpoint byte stream is malformed or inconsistent."""


class SearchError(BnasError):
    """The search loop was driven into an invalid state."""


class ConfigError(BnasError):
    """A run configuration is invalid or incomplete."""
