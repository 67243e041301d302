"""
Exception hierarchy shared by the ingestion, modelling and experiment engines.
"""


class DestinationError(Exception):
    """Root of every error raised by this package."""


class InvalidCoordinateError(DestinationError, ValueError):
    """Latitude/longitude outside the WGS84 domain or not finite."""


class TripFileError(DestinationError):
    """Input file missing or unreadable."""


class SchemaError(DestinationError):
    """Input file readable but its columns do not match the declared format."""


class ClusteringError(DestinationError):
    """K-means cannot be fitted on the given points."""


class ShapeError(DestinationError, ValueError):
    """Tensor or feature shapes are inconsistent."""


class NonFiniteError(DestinationError, FloatingPointError):
    """A NaN or Inf appeared in a tensor, a loss or a gradient."""


class SplitError(DestinationError):
    """Split fractions invalid or a split came out empty."""


class ConfigError(DestinationError):
    """Configuration file or experiment spec cannot be resolved."""


class StageMissingError(DestinationError):
    """A pipeline stage was invoked before the stage producing its input."""

    def __init__(self, stage: str, detail: str):
        super().__init__(f"missing input stage '{stage}': {detail}")
        self.stage = stage


class TrainingDivergedError(DestinationError):
    """Loss became non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
