"""Exception hierarchy. ``kind`` feeds the CLI's machine-readable error prefix."""


class MBCError(Exception):
    kind = "runtime"


class ConfigError(MBCError, ValueError):
    """Invalid configuration; detected before any work starts."""

    kind = "config"


class ShapeError(ConfigError):
    kind = "shape"


class DataError(MBCError, ValueError):
    kind = "data"


class UndefinedAUCError(MBCError, ValueError):
    """AUC requested on single-class labels."""

    kind = "undefined-auc"


class NonFiniteGradientError(MBCError, FloatingPointError):
    kind = "nan-gradient"

    def __init__(self, param_name):
        super().__init__(f"non-finite gradient in parameter {param_name!r}")
        self.param_name = param_name


class CheckpointError(MBCError):
    kind = "checkpoint"


class CorruptCheckpointError(CheckpointError):
    kind = "checkpoint-corrupt"


class CheckpointVersionError(CheckpointError):
    kind = "checkpoint-version"


class SchemaMismatchError(CheckpointError, ConfigError):
    kind = "schema-mismatch"
