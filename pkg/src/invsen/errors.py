"""Exception types shared across the package."""


class InvsenError(Exception):
    """Base class for all invsen errors."""


class ShapeError(InvsenError, ValueError):
    """Array dimensions do not line up with what an operation expects."""


class ConfigError(InvsenError, ValueError):
    """A configuration value is missing, out of range, or inconsistent."""


class DataFormatError(InvsenError, ValueError):
    """A dataset or metrics file does not conform to its documented format."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class CheckpointError(InvsenError, ValueError):
    """A checkpoint file is corrupt, truncated, or from an unknown version."""


class NumericsError(InvsenError, ArithmeticError):
    """A numerical routine produced non-finite values or failed to converge."""


class TrainingDiverged(InvsenError, RuntimeError):
    """The training loss went non-finite or exploded past the guard threshold."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}
