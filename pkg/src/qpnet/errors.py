"""Exception hierarchy shared by all modules."""


class QPNetError(Exception):
    """Base class; ``kind`` is the short tag printed by the CLI."""

    kind = "error"


class ConfigurationError(QPNetError, ValueError):
    kind = "configuration"


class DataError(QPNetError, ValueError):
    kind = "data"


class UsageError(QPNetError, ValueError):
    kind = "usage"


class MeasurementError(QPNetError, ValueError):
    kind = "measurement"


class WavFormatError(QPNetError, OSError):
    kind = "io"


class CheckpointError(QPNetError, OSError):
    kind = "io"


class CheckpointVersionError(CheckpointError):
    kind = "version"


class TrainingDivergedError(QPNetError, RuntimeError):
    kind = "diverged"
