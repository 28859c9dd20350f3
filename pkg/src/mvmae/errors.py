"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called outside its documented domain."""


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed; message carries the byte offset."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss; .step records the offending step."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step
