"""Exception vocabulary shared across the toolkit."""


class AmpscribeError(Exception):
    """Base class for all toolkit errors."""


class DegenerateSignal(AmpscribeError):
    """Signal has zero peak amplitude; normalization is undefined."""


class EmptySignal(AmpscribeError):
    """Zero-length audio where a non-empty signal is required."""


class InvalidRange(AmpscribeError):
    """A frequency or index range is empty or inverted."""


class InvalidPitch(AmpscribeError):
    """MIDI pitch outside the supported [40, 88] guitar range."""


class ShapeMismatch(AmpscribeError):
    """Tensor shapes incompatible with the requested operation."""


class BatchTooSmall(AmpscribeError):
    """Contrastive batch needs at least two positive pairs."""


class DegenerateEmbedding(AmpscribeError):
    """Zero vector where a direction is required (cosine similarity)."""


class InsufficientData(AmpscribeError):
    """Dataset too small for the requested sampling or evaluation."""


class ClipTooShort(AmpscribeError):
    """Clip shorter than the minimum needed for tone extraction."""


class MissingDependency(AmpscribeError):
    """A required upstream artifact (dataset, checkpoint) is absent."""


class EmptyInput(AmpscribeError):
    """Aggregation over zero pieces."""


class IoFailure(AmpscribeError):
    """Filesystem failure while writing or reading pipeline artifacts."""


class NoteOutOfGridWarning(UserWarning):
    """A note lies entirely beyond the rasterization grid and was dropped."""
