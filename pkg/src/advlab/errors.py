"""Shared exception types."""


class AdvlabError(Exception):
    """Base class for all library errors."""


class ConfigurationError(AdvlabError):
    """Invalid configuration, shape mismatch, or unknown option."""


class NumericsError(AdvlabError):
    """Non-finite values encountered during computation.

    Carries enough context (layer index, epoch/batch/iteration) to locate
    the failure.
    """

    def __init__(self, message: str, *, layer: int | None = None,
                 epoch: int | None = None, batch: int | None = None,
                 iteration: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch
        self.batch = batch
        self.iteration = iteration


class DataFormatError(AdvlabError):
    """Malformed dataset/tensor container or value out of the valid range."""


class CheckpointError(AdvlabError):
    """Checkpoint cannot be loaded (wrong kind, version, or missing tensor)."""
