"""Exception hierarchy shared by all heatgrid modules."""


class HeatgridError(Exception):
    """Base class for every error raised deliberately by heatgrid."""


class ShapeError(HeatgridError, ValueError):
    """Operand extents are incompatible with an operation's contract."""


class GradientError(HeatgridError, RuntimeError):
    """Misuse of reverse-mode differentiation (e.g. backward on a non-scalar)."""


class IngestionError(HeatgridError):
    """An input file could not be parsed.

    ``path``, ``line`` and ``column`` locate the offending token when known.
    """

    def __init__(self, message, path=None, line=None, column=None):
        self.path = str(path) if path is not None else None
        self.line = line
        self.column = column
        loc = ""
        if self.path is not None:
            loc = self.path
            if line is not None:
                loc += f":{line}"
                if column is not None:
                    loc += f":{column}"
            loc += ": "
        super().__init__(loc + message)


class AlignmentError(HeatgridError):
    """Thermal and meteorological records do not line up for a requested day."""


class DegenerateChannelError(HeatgridError, ValueError):
    """A channel or layer has no spread, so it cannot be rescaled."""

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class DatasetError(HeatgridError):
    """The assembled dataset violates a precondition (too few samples, etc.)."""


class ConfigError(HeatgridError, ValueError):
    """Configuration values are missing or out of range."""


class FetchError(HeatgridError):
    """Base for weather-service failures."""


class TransportError(FetchError):
    def __init__(self, message, status=None):
        self.status = status
        super().__init__(message)


class ResponseParseError(FetchError):
    pass


class SchemaError(FetchError):
    def __init__(self, message, variable=None):
        self.variable = variable
        super().__init__(message)


class OfflineError(FetchError):
    """A network request was needed while offline mode forbids it."""


class NonFiniteError(HeatgridError, FloatingPointError):
    """A loss or gradient became NaN or infinite during training."""


class CheckpointError(HeatgridError):
    """A checkpoint or sample cache is truncated, corrupt or incompatible."""
