"""Exception types shared across the pipeline.

Everything raised on purpose derives from AyceError so callers can catch
one base class at the CLI boundary. Missing files raise the builtin
FileNotFoundError and are not wrapped.
"""

from __future__ import annotations


class AyceError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(AyceError):
    """A record in an input file violates the documented schema."""

    def __init__(self, message, track_id=None, field=None):
        detail = message
        if track_id is not None:
            detail = f"track {track_id!r}: {detail}"
        if field is not None:
            detail = f"{detail} (field: {field})"
        super().__init__(detail)
        self.track_id = track_id
        self.field = field


class CaptionCountError(SchemaError):
    """A track does not carry exactly three captions."""


class EmptyDatasetError(AyceError):
    """An operation needs at least one track."""


class SyntheticSpecError(AyceError):
    """A synthetic-corpus spec is inconsistent or out of range."""


class FeatureWidthError(AyceError):
    """An appearance feature vector is not 256 wide."""


class ZeroVectorError(AyceError):
    """Cosine distance is undefined for a zero-norm input."""


class DimensionMismatchError(AyceError):
    """Two vectors that must share a dimension do not."""


class TooFewTracksError(AyceError):
    """Separation statistics need at least two tracks."""


class MissingTruthError(AyceError):
    """A ranking has no entry for the true candidate."""


class EmptyCaptionError(AyceError):
    """A caption is empty or whitespace-only."""


class LengthMismatchError(AyceError):
    """Paired distance batches differ in length."""


class NonFiniteLossError(AyceError):
    """Training produced a NaN or infinite loss.

    Carries the seed of the offending batch so the run can be replayed.
    """

    def __init__(self, message, batch_seed=None):
        super().__init__(message)
        self.batch_seed = batch_seed


class NoCandidatesError(AyceError):
    """Hard-negative mining found no other-track candidate in the batch."""


class BoxOutOfImageError(AyceError):
    """A tracking box does not fit inside the stated image size."""


class ShapeError(AyceError):
    """A tensor argument has the wrong shape."""


class AllMaskedError(AyceError):
    """A pooling or attention step received a fully masked input."""


class NonMonotoneIndicesError(AyceError):
    """Frame indices for positional encoding must strictly increase."""


class CheckpointError(AyceError):
    """A checkpoint file is malformed, truncated, or of the wrong kind."""


class EmptyStoreError(AyceError):
    """An embedding store holds no tracks."""


class ConfigError(AyceError):
    """A config file or preset name could not be interpreted."""
