class TgrError(Exception):
    """Base class for every failure the library reports to callers"""

    code = "error"


class DimensionError(TgrError, ValueError):
    code = "dimension"


class DomainError(TgrError, ValueError):
    code = "domain"


class ConfigError(TgrError, ValueError):
    code = "config"

    def __init__(self, message, key=None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class StaleCacheError(TgrError):
    code = "stale-cache"


class NumericalError(TgrError, ArithmeticError):
    code = "numeric"


class ArtifactFormatError(TgrError):
    code = "format"

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DatasetValidationError(TgrError, ValueError):
    code = "dataset"


class TrainingError(TgrError):
    code = "training"

    def __init__(self, message, epoch, batch):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")


class UntrainedModelError(TgrError):
    code = "untrained"
