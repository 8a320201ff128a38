"""Categorized errors for the REBAR pipeline.

Every error carries a machine-readable code, a message and optional details,
mirroring the structured error documents the CLI prints.
"""

from typing import Any, Dict, Optional


class RebarError(Exception):
    """Base class for all pipeline errors."""

    code = "REBAR_ERROR"
    exit_code = 1

    def __init__(self, message: str, details: Optional[Any] = None):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to the {code, message, details} structure."""
        return {
            "code": self.code,
            "message": self.message,
            "details": self.details,
        }


class ConfigError(RebarError):
    """Configuration failed validation; details list every violated field."""

    code = "CONFIG_INVALID"
    exit_code = 2


class MissingArtifactError(RebarError):
    """A prior-stage artifact required by a command does not exist."""

    code = "MISSING_ARTIFACT"
    exit_code = 3


class ArtifactExistsError(RebarError):
    """An output already exists and --force was not given."""

    code = "ARTIFACT_EXISTS"
    exit_code = 3


class DataFormatError(RebarError):
    """A dataset file is missing, unreadable or malformed."""

    code = "DATA_FORMAT"
    exit_code = 4


class DataConsistencyError(RebarError):
    """Series in a dataset disagree with each other (channels, rate, splits)."""

    code = "DATA_CONSISTENCY"
    exit_code = 4


class CheckpointError(RebarError):
    """Checkpoint header, config or tensor shapes do not match."""

    code = "CHECKPOINT_INVALID"
    exit_code = 4


class InputValidationError(RebarError):
    """An operation received inputs outside its contract."""

    code = "VALIDATION_ERROR"
    exit_code = 5


class SizeError(InputValidationError):
    """Lengths or channel counts do not line up."""

    code = "SIZE_MISMATCH"


class DataValidationError(InputValidationError):
    """Values violate a type invariant (non-finite entries, bad labels)."""

    code = "DATA_INVALID"


class SegmentNotFoundError(InputValidationError):
    """No window satisfying a class filter exists in a series."""

    code = "SEGMENT_NOT_FOUND"


class TrainingDivergedError(RebarError):
    """A training loss became non-finite."""

    code = "TRAINING_DIVERGED"
    exit_code = 6


class MeasureModifiedError(RebarError):
    """A distance measure that must stay frozen changed during training."""

    code = "MEASURE_MODIFIED"
    exit_code = 6


class StorageError(RebarError):
    """A file or directory could not be created or written."""

    code = "IO_ERROR"
    exit_code = 4
