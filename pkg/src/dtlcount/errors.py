"""Exception types shared across the package."""


class DtlError(Exception):
    """Base class for all errors raised by dtlcount."""


class ShapeError(DtlError):
    """Dimension mismatch in a tensor operation, naming the offending axis."""

    def __init__(self, op, axis, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {axis} mismatch (expected {expected}, got {got})")


class GradientError(DtlError):
    """Raised when gradients are missing or the graph cannot be differentiated."""


class ConfigError(DtlError):
    """Invalid or unknown configuration content."""


class DataError(DtlError):
    """Malformed dataset files or annotation content."""


class CheckpointFormatError(DtlError):
    """Checkpoint bytes rejected; carries the byte offset of the defect."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")
