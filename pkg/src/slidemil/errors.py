"""Exception types shared across the pipeline."""


class SlidemilError(Exception):
    """Base class for all pipeline errors."""


class UnsupportedFormat(SlidemilError):
    """File is not a format the slide reader understands."""


class CorruptFile(SlidemilError):
    """File exists but cannot be decoded."""


class OutOfBounds(SlidemilError):
    """Requested region falls outside the slide."""


class DegenerateHistogram(SlidemilError):
    """Histogram has a single occupied intensity; no threshold exists."""


class MaskMismatch(SlidemilError):
    """Tissue mask dimensions are inconsistent with the slide."""


class ShapeMismatch(SlidemilError):
    """Tile pixels do not match the model's configured input size."""


class EmptyDataset(SlidemilError):
    """Training requested on an empty dataset."""


class NonFiniteLoss(SlidemilError):
    """Loss became NaN or infinite during a training step."""


class CorruptCheckpoint(SlidemilError):
    """Checkpoint file cannot be restored."""


class InvalidSimplex(SlidemilError):
    """Probability vector is not a valid simplex point."""


class EmptySlide(SlidemilError):
    """Operation requires at least one tile."""


class EmptyInput(SlidemilError):
    """Operation requires a non-empty input."""


class LengthMismatch(SlidemilError):
    """Paired vectors have different lengths."""


class UnknownSlide(SlidemilError):
    """No submission with this id is known to the service."""


class InvalidVerdict(SlidemilError):
    """Feedback verdict outside the closed set."""


class ResultNotReady(SlidemilError):
    """Diagnosis has not completed for this slide."""
