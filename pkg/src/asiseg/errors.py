"""Exception types shared across the package."""


class AsisegError(Exception):
    """Base class for package-specific failures."""


class SchemaError(AsisegError):
    """A data file does not match its documented schema."""


class DatasetError(AsisegError):
    """A dataset directory or manifest is inconsistent."""


class CheckpointError(AsisegError):
    """A checkpoint file is missing, corrupt, or version-incompatible."""


class TrainingDivergedError(AsisegError):
    """Training hit a non-finite loss; carries the offending epoch/batch."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
