"""Exception types shared across the package."""


class CarffError(Exception):
    pass


class InvalidCameraError(CarffError, ValueError):
    pass


class ShapeMismatchError(CarffError, ValueError):
    pass


class CheckpointError(CarffError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, field, expected, found):
        self.field = field
        super().__init__(f"config mismatch on '{field}': expected {expected!r}, found {found!r}")


class OrderingError(CarffError):
    """A training/inference stage was invoked without its prerequisite stage."""


class AmbiguousLocalizationError(CarffError):
    pass


class DatasetError(CarffError):
    pass
