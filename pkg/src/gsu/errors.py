"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: UsageError -> 2, DataError -> 3,
NumericsError -> 4.
"""


class GsuError(Exception):
    """Base class for package errors."""


class UsageError(GsuError):
    """Bad flags, bad config keys, contradictory options."""


class DataError(GsuError):
    """Malformed scene files, checkpoints, or inconsistent inputs."""


class NumericsError(GsuError):
    """NaN/Inf encountered where finite values are required."""


class ShapeError(GsuError):
    """Incompatible tensor shapes."""


class CheckpointError(DataError):
    """Corrupt or mismatched checkpoint file; carries a byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
