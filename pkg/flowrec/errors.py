class FlowRecError(Exception):
    """Base class for every domain error raised by `flowrec`."""


class ConfigError(FlowRecError, ValueError):
    """A run configuration is malformed or holds an invalid value."""


class DataError(FlowRecError, ValueError):
    """An interaction log could not be turned into a dataset."""


class DatasetCollapsedError(DataError):
    """Core filtering removed every user or item."""


class CheckpointError(FlowRecError):
    """A checkpoint file is unreadable, truncated, or of an unknown version."""


class IncompatibleCheckpointError(CheckpointError):
    """A checkpoint was written for a different model shape."""


class TrainingError(FlowRecError, RuntimeError):
    """Optimization cannot proceed (no active loss, non-finite values)."""


class DivergedError(TrainingError):
    """The Euler integration produced a non-finite state."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"Euler integration diverged at step {step}.")
