"""Exception types shared across the package."""


class BridgeError(Exception):
    """Base class for all structured errors raised by this package."""


class ShapeMismatchError(BridgeError):
    pass


class FeatureFileError(BridgeError):
    """Base class for feature-file format errors."""


class BadMagicError(FeatureFileError):
    pass


class VersionMismatchError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DimensionMismatchError(FeatureFileError):
    pass


class CheckpointError(BridgeError):
    pass


class ConfigHashMismatchError(CheckpointError):
    pass


class ConfigError(BridgeError):
    pass


class TrainingDivergedError(BridgeError):
    pass
