"""Exception types shared across the package."""


class VdformerError(Exception):
    """Base class for all package errors."""


class ShapeError(VdformerError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(VdformerError, ValueError):
    """A configuration value violates its constraints."""


class ContractError(VdformerError, ValueError):
    """A documented precondition of an operation was violated."""


class ValidationError(VdformerError, ValueError):
    """User-supplied input (config file, CLI flags, data files) is invalid."""


class GenerationError(VdformerError, RuntimeError):
    """Synthetic volume generation could not satisfy placement constraints."""


class VolumeFormatError(VdformerError, ValueError):
    """A volume file on disk is malformed."""


class MetricUndefinedError(VdformerError, ValueError):
    """A metric is undefined for the given inputs (e.g. no ground truth)."""


class CheckpointMismatchError(VdformerError, ValueError):
    """Checkpoint contents do not match the model built from the config."""


class TrainingDivergedError(VdformerError, RuntimeError):
    """Training produced a non-finite loss."""
