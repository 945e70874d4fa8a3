"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class MagcrnError(Exception):
    exit_code = 1


class ConfigError(MagcrnError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class InvalidSweepValue(ConfigError):
    pass


class ShapeMismatch(MagcrnError, ValueError):
    exit_code = 3


class InvalidAxis(ShapeMismatch):
    pass


class NotScalar(MagcrnError, ValueError):
    exit_code = 3


class DetachedTensor(MagcrnError, RuntimeError):
    exit_code = 3


class AlphaOutOfRange(ConfigError, ValueError):
    pass


class DataError(MagcrnError):
    exit_code = 4


class SchemaError(DataError):
    pass


class GridError(DataError):
    pass


class EmptyDataset(DataError):
    pass


class TooShort(DataError):
    pass


class ConstantChannel(DataError):
    pass


class EmptySplit(DataError):
    pass


class EmptyInput(DataError, ValueError):
    pass


class ZeroTargetNorm(DataError, ValueError):
    pass


class CheckpointError(MagcrnError):
    exit_code = 5


class IoError(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


class NonFiniteLoss(MagcrnError, FloatingPointError):
    exit_code = 6
