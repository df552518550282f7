"""Exception types shared across the toolkit."""


class FsdetError(Exception):
    """Base class for all toolkit errors."""


class DatasetError(FsdetError):
    """Dataset root is missing, malformed, or inconsistent."""


class AnnotationError(DatasetError):
    """A single annotation file could not be parsed; message names the file."""


class VocabularyError(DatasetError):
    """A class name or id falls outside the dataset vocabulary."""


class CapacityError(FsdetError):
    """Not enough annotations available to satisfy a k-shot request."""

    def __init__(self, message: str, available: dict | None = None):
        super().__init__(message)
        self.available = dict(available or {})


class SamplingError(FsdetError):
    """Episode assembly could not satisfy its constraints."""


class ShapeError(FsdetError, ValueError):
    """Array or raster dimensions violate an operation's contract."""


class UsageError(FsdetError):
    """An operation was fed a value from the wrong pipeline stage."""


class ConfigError(FsdetError):
    """Invalid or inconsistent run configuration."""


class MissingArtifactError(FsdetError):
    """A prerequisite artifact (checkpoint, manifest, dataset) was not found."""


class TrainingDiverged(FsdetError):
    """Loss became non-finite; a diagnostic checkpoint may have been written."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
