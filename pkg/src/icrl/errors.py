"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class ICRLError(Exception):
    exit_code = 1


class UsageError(ICRLError, ValueError):
    exit_code = 2


class SpecificationError(UsageError):
    """An environment or task definition is invalid."""


class ConfigError(UsageError):
    """A configuration value is missing, unknown or inconsistent."""


class FormatError(ICRLError):
    """A binary file is malformed; ``offset`` is the byte position of the fault."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(ICRLError, FloatingPointError):
    exit_code = 4
