"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems exit 2, runtime failures (e.g. divergence) exit 3.
"""


class BuildingSegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(BuildingSegError):
    """Invalid configuration value (unknown variant, bad threshold, ...)."""


class InputDomainError(BuildingSegError):
    """Input values outside the documented domain (e.g. pixel > 255)."""


class ShapeError(BuildingSegError):
    """Array/tensor shape violates an operation's contract."""


class ManifestError(BuildingSegError):
    """Dataset layout problems: missing dirs, orphan files, empty splits."""


class CheckpointError(BuildingSegError):
    """Checkpoint missing, unreadable, or incompatible with the model."""


class DivergenceError(BuildingSegError):
    """Training produced a non-finite loss."""


class EvaluationError(BuildingSegError):
    """Metric computation over an empty region or empty report list."""
