"""Exception hierarchy shared by all stylenet modules.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class StyleNetError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(StyleNetError):
    """An API or CLI was called in a way that can never succeed."""


class ConfigError(UsageError):
    """A configuration value is out of its legal range."""


class ShapeError(ConfigError):
    """Tensor shapes are not conformable for the requested operation."""


class DataError(StyleNetError):
    """An input file or dataset is malformed or unreadable."""


class NumericError(StyleNetError):
    """A forward operation produced a non-finite value."""


class TrainingDivergedError(NumericError):
    """Training loss became non-finite; carries the last epoch that finished."""

    def __init__(self, message: str, last_good_epoch: int):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch


class CheckpointError(DataError):
    """Base class for checkpoint file problems."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared contents."""


class CheckpointShapeError(CheckpointError):
    """A stored parameter does not match the model built from the stored config."""
