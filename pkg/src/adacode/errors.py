"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """An argument violates a shape, range or membership precondition."""


class StageMismatchError(InvalidInputError):
    """A checkpoint from the wrong training stage was supplied."""


class ConfigError(ValueError):
    """The run configuration failed validation."""


class CheckpointFormatError(RuntimeError):
    """A checkpoint file is truncated, unreadable or missing a group."""


class CheckpointCorruptError(CheckpointFormatError):
    """A checkpoint group's content hash does not match its manifest."""


class TrainingDivergedError(RuntimeError):
    """A loss term became non-finite during training."""

    def __init__(self, term: str, step: int, value: float):
        self.term = term
        self.step = step
        self.value = value
        super().__init__(f"loss term '{term}' is {value} at step {step}")
