"""Exception hierarchy. The CLI maps these onto distinct exit codes:
configuration problems, unmet stage preconditions, and numeric failures."""


class MlfdError(Exception):
    """Base class for all package errors."""


class ConfigError(MlfdError):
    """Invalid configuration: unknown keys, inconsistent counts, bad values."""

    exit_code = 2


class ShapeError(ConfigError):
    """Incompatible tensor shapes; message names the operation and axes."""


class PreconditionError(MlfdError):
    """A required input (checkpoint, cache, split) is missing or unusable."""

    exit_code = 3


class StaleCacheError(PreconditionError):
    """On-disk cache was produced under a different model hash."""


class CorruptionError(PreconditionError):
    """Stored bytes fail checksum or length validation."""


class FormatError(PreconditionError):
    """A manifest or serialized file violates the on-disk format."""


class NumericError(MlfdError):
    """NaN/Inf reached a forward op, or backward was replayed without reset."""

    exit_code = 4
