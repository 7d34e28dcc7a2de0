"""Exception hierarchy shared across the package."""


class RtgBidError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RtgBidError, ValueError):
    pass


class BoundsError(RtgBidError, IndexError):
    pass


class ContractError(RtgBidError, ValueError):
    """A precondition of an operation was violated by the caller."""


class MissingNodeError(RtgBidError, KeyError):
    pass


class DeterminismError(RtgBidError, RuntimeError):
    pass


class NumericError(RtgBidError, FloatingPointError):
    pass


class ConfigError(RtgBidError, ValueError):
    pass


class EpisodeOverError(RtgBidError, RuntimeError):
    pass


class DuplicationError(RtgBidError, ValueError):
    pass


class LoadError(RtgBidError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(RtgBidError, ValueError):
    pass


class ContaminationError(RtgBidError, ValueError):
    """Evaluation seeds overlap the seeds used to build training data."""
