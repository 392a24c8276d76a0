"""Human-in-the-loop attention guidance for small image classifiers.

Train a CNN, inspect where it looks via class activation maps, click the
places it should (and should not) attend to, and fine-tune against those
clicks — plus an active-learning loop that picks which images to annotate
and a simulated annotator for headless experiments.
"""

__version__ = "0.1.0"

from .errors import (AttnguideError, CheckpointError, ConfigError,
                     ContractError, DegenerateMapError, IngestionError,
                     ShapeError, TrainingError)

__all__ = [
    "AttnguideError", "CheckpointError", "ConfigError", "ContractError",
    "DegenerateMapError", "IngestionError", "ShapeError", "TrainingError",
    "__version__",
]
