"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible with an op's contract."""


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""


class NumericError(RuntimeError):
    """A non-finite value appeared in a loss or gradient."""


class FrameIOError(OSError):
    """A pixmap file or dataset directory could not be read or written."""
