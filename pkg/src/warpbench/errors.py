"""Exception types shared across the toolkit."""


class WarpbenchError(Exception):
    """Base class for all toolkit errors."""


class FormatError(WarpbenchError):
    """File does not match the expected binary format (magic, version, checksum)."""


class ConsistencyError(WarpbenchError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class TruncationError(WarpbenchError):
    """File ended before the declared payload was read."""


class InsufficientDataError(WarpbenchError):
    """A class has fewer samples than an operation requires."""


class ParameterError(WarpbenchError):
    """A parameter value is outside its documented domain."""


class DimensionError(WarpbenchError):
    """Array shapes are incompatible for the requested operation."""


class DivergenceError(WarpbenchError):
    """Training produced a non-finite loss."""


class SolverError(WarpbenchError):
    """A linear system could not be solved as posed."""


class IoError(WarpbenchError):
    """A path could not be read or written."""
