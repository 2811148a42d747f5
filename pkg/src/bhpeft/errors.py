"""Exception hierarchy shared across the package.

The CLI maps ``ConfigError`` / ``InputError`` to exit code 2 and everything
else derived from ``BHPeftError`` to exit code 1.
"""


class BHPeftError(Exception):
    """Base class for all package errors."""


class ConfigError(BHPeftError, ValueError):
    """Invalid configuration or hyperparameter."""


class InputError(BHPeftError, ValueError):
    """Invalid input data (token ids, targets, rates, files)."""


class ShapeError(BHPeftError, ValueError):
    """Array shapes disagree."""


class ContractError(BHPeftError, RuntimeError):
    """An operation was called outside its precondition."""


class NonFiniteLossError(BHPeftError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


class CheckpointError(BHPeftError):
    """Base class for checkpoint (de)serialization failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError, ShapeError):
    pass
