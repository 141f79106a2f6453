"""Exception hierarchy shared across the package."""


class MfusError(Exception):
    """Base class for all package errors."""


class ParseError(MfusError):
    """Malformed input file (carries a line number when available)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyInputError(MfusError):
    """Input yielded zero usable rows or columns."""


class ConfigError(MfusError):
    """Invalid configuration value."""


class ShapeError(MfusError):
    """Incompatible tensor shapes."""


class InvariantError(MfusError):
    """A documented invariant was violated at runtime."""


class CheckpointError(MfusError):
    """Unreadable, truncated, or incompatible checkpoint file."""
