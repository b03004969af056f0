"""Exception hierarchy. Every domain failure derives from LandmarkError so the
CLI can map it to a nonzero exit code with a clean message."""


class LandmarkError(Exception):
    """Base class for all domain errors raised by this package."""


class GeometryError(LandmarkError):
    """Invalid volume geometry (bad spacing, non-orthonormal or singular direction)."""


class ConfigError(LandmarkError):
    """Invalid plan, override, or CLI configuration."""


class EncodingError(LandmarkError):
    """Landmark cannot be encoded into a label map (e.g. outside the grid)."""


class ValidationError(LandmarkError):
    """Dataset constraint violated (e.g. label cubes would overlap)."""


class PreprocessingError(LandmarkError):
    """Case cannot be brought to plan spacing (e.g. landmark leaves the grid)."""


class EvaluationError(LandmarkError):
    """Ground truth and prediction cannot be compared."""


class ContractError(LandmarkError):
    """Caller violated an operation contract (e.g. mismatched shapes)."""


class ConversionError(LandmarkError):
    """External dataset cannot be converted to the internal layout."""


class TrainingError(LandmarkError):
    """Training aborted (e.g. non-finite loss)."""


class VolumeIOError(LandmarkError):
    """Volume file unreadable or malformed."""
