"""Exception types raised across the pipeline.

Every failure mode a caller is expected to handle has its own class so
batch drivers can distinguish recoverable per-slide problems from bugs.
"""


class TsrPipeError(Exception):
    """Base class for all pipeline errors."""


# raster ---------------------------------------------------------------

class MalformedHeaderError(TsrPipeError):
    """Image file header is not a valid binary PPM (P6) header."""


class TruncatedDataError(TsrPipeError):
    """Image file ends before the declared pixel payload is complete."""


class UnsupportedMaxvalError(TsrPipeError):
    """PPM maxval is not 255; only 8-bit samples are supported."""


class DegenerateHistogramError(TsrPipeError):
    """All histogram mass sits in a single bin; no threshold separates two classes."""


class RectOutOfBoundsError(TsrPipeError):
    """Rectangle does not lie fully inside the raster."""


# stain ----------------------------------------------------------------

class InsufficientTissueError(TsrPipeError):
    """Too few pixels pass the optical-density filter, or the two estimated
    stain directions collapse onto each other."""


class SingularSystemError(TsrPipeError):
    """Stain matrix columns are parallel within tolerance; deconvolution is singular."""


# annotate -------------------------------------------------------------

class MalformedJsonError(TsrPipeError):
    """File is not valid JSON or lacks the required structure."""


class UnknownClassNameError(TsrPipeError):
    """Class name outside the fixed tissue-class vocabulary."""


class DegeneratePolygonError(TsrPipeError):
    """Polygon ring has fewer than 3 vertices."""


# tiler ----------------------------------------------------------------

class DimensionMismatchError(TsrPipeError):
    """Paired rasters (image/mask/label map) do not share dimensions."""


# cohort ---------------------------------------------------------------

class ConstraintsUnsatisfiableError(TsrPipeError):
    """No random slide split satisfied the balance constraints within the attempt budget."""


class InsufficientClassPopulationError(TsrPipeError):
    """A residual source class has fewer entries than its sampling quota."""


class TooFewPatchesError(TsrPipeError):
    """Not enough patches for the requested split or training run."""


# model ----------------------------------------------------------------

class WrongPatchSizeError(TsrPipeError):
    """Classifier input is not a 224x224 RGB patch."""


class EmptyBatchError(TsrPipeError):
    """Loss requested over an empty batch."""


class EmptyGridError(TsrPipeError):
    """Cross-validation called with an empty hyperparameter grid."""


class MissingCorpusError(TsrPipeError):
    """A training setup stage requires a corpus that was not provided."""


class MissingPatchIdError(TsrPipeError):
    """External predictions file has no row for the requested patch id."""


class MalformedRowError(TsrPipeError):
    """External predictions row cannot be parsed into valid class probabilities."""


class NonNormalizedRowError(TsrPipeError):
    """External predictions row sums to something off 1 by more than 1e-6."""


class CheckpointError(TsrPipeError):
    """Weight checkpoint file is missing the magic header or is truncated."""


# scoring --------------------------------------------------------------

class NoTumorOrStromaError(TsrPipeError):
    """TSR is undefined: zero tumor and zero stroma patches."""


class LengthMismatchError(TsrPipeError):
    """Paired sequences have different lengths."""


class EmptyInputError(TsrPipeError):
    """Operation requires at least one element."""


class ZeroVarianceError(TsrPipeError):
    """Correlation is undefined for a constant sequence."""


class UnknownCategoryError(TsrPipeError):
    """True-TSR category outside the discrete {10, ..., 90} scale."""


# synth ----------------------------------------------------------------

class InfeasibleLayoutError(TsrPipeError):
    """Slide too small (or margins too large) for the requested tissue grid."""
