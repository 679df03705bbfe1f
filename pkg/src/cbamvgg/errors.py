"""Shared exception types.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is a bug.
"""


class CbamVggError(Exception):
    """Base class for all library errors."""


class ShapeError(CbamVggError, ValueError):
    """Tensor shapes disagree; the message names the offending dimension."""


class NonFiniteError(CbamVggError, ValueError):
    """A NaN or Inf reached a public operation boundary."""


class ConfigError(CbamVggError, ValueError):
    """Invalid build/run configuration (bad flag, unknown preset, ...)."""


class DataError(CbamVggError, ValueError):
    """Dataset or image input cannot be used (missing, undecodable, too small)."""


class NumericError(CbamVggError, RuntimeError):
    """Training produced a non-finite value; message names the first bad layer."""


class CheckpointError(ConfigError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version does not match this library."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint payload is shorter than the manifest promises."""


class CheckpointShapeError(CheckpointError):
    """Manifest shapes disagree with the payload or the declared topology."""
