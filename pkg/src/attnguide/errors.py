"""Exception types shared across the package."""


class AttnguideError(Exception):
    """Base class for all package errors."""


class ShapeError(AttnguideError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(AttnguideError):
    """A documented precondition was violated by the caller."""


class ConfigError(AttnguideError):
    """Invalid configuration object."""


class TrainingError(AttnguideError):
    """Training diverged or otherwise failed."""


class CheckpointError(AttnguideError):
    """Checkpoint file is missing, truncated, or has an unknown version."""


class IngestionError(AttnguideError):
    """An input file could not be read or decoded."""


class DegenerateMapError(AttnguideError):
    """Attention map is all-zero; barycenter-based guidance is undefined."""
