"""Exception types shared across the package."""


class FeatreconError(Exception):
    """Base class for package errors."""


class IngestionError(FeatreconError):
    """A dataset is missing or unreadable."""


class FormatError(FeatreconError):
    """A binary file does not match its declared layout."""


class ConfigError(FeatreconError):
    """An invalid or inconsistent configuration."""


class TrainingDivergenceError(FeatreconError):
    """Training produced non-finite losses and was aborted."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(FeatreconError):
    """A checkpoint file is incompatible, truncated, or corrupt."""


class NumericError(FeatreconError):
    """A non-finite value appeared where a finite one is required."""
