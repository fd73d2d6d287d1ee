"""Exception types raised by the morphogate library.

Every error that reflects bad input data (as opposed to a bug) derives from
MorphogateError so the command line layer can map it to a data-error exit code.
"""


class MorphogateError(Exception):
    """Base class for all data and usage errors raised by this package."""


# ---------------------------------------------------------------------------
# volume grids and file I/O

class MalformedHeader(MorphogateError):
    """Sidecar header is missing, unparseable, or has invalid fields."""


class PayloadSizeMismatch(MorphogateError):
    """Binary payload length does not match dims/channels/dtype in the header."""


class NonFiniteData(MorphogateError):
    """A floating-point volume contains NaN or infinity."""


class IoFailure(MorphogateError):
    """Underlying file could not be read or written."""


class GridTooSmall(MorphogateError):
    """Grid has fewer than the required voxels per axis for this operation."""


class GeometryMismatch(MorphogateError):
    """Two grid objects that must share dims/spacing do not."""


class AtlasMismatch(MorphogateError):
    """An atlas or prior file's content hash differs from the one a trained
    model was built against."""


# ---------------------------------------------------------------------------
# morphometry

class NonDiffeomorphicField(MorphogateError):
    """Too many voxels with nonpositive Jacobian determinant.

    Carries the offending fraction so callers can report it.
    """

    def __init__(self, fraction: float, message: str | None = None):
        self.fraction = fraction
        super().__init__(message or f"nonpositive Jacobian determinant at fraction {fraction:.6g} of voxels")


# ---------------------------------------------------------------------------
# atlas

class EmptyRegion(MorphogateError):
    """A region index in 1..m has no voxels."""

    def __init__(self, region: int, message: str | None = None):
        self.region = region
        super().__init__(message or f"region {region} has no voxels")


class LabelOutOfRange(MorphogateError):
    """A voxel label exceeds the declared region count."""


class ParcellationFailed(MorphogateError):
    """Procedural parcellation could not produce valid regions within the retry budget."""


# ---------------------------------------------------------------------------
# clinical records and embeddings

class UnknownSubject(MorphogateError):
    """A lookup-table embedder has no vector for the requested subject."""


class ZeroVector(MorphogateError):
    """An embedding came out identically zero and cannot be normalized."""


class MissingEmbedding(MorphogateError):
    """Prediction requested for a subject whose embedding cannot be produced."""


# ---------------------------------------------------------------------------
# model and training

class DimensionMismatch(MorphogateError):
    """Vector or matrix shapes disagree with the declared layer sizes."""


class MissingForwardCache(MorphogateError):
    """Backward pass invoked without the matching forward cache."""


class EmptyBatch(MorphogateError):
    """Loss or gradient requested over zero samples."""


class UnlabeledSubject(MorphogateError):
    """Training requires an outcome label but the record has none."""


class DegenerateNormStats(MorphogateError):
    """Per-modality standard deviation is zero; z-scoring is impossible."""


# ---------------------------------------------------------------------------
# metrics

class ZeroBaseline(MorphogateError):
    """Improvement rate undefined because the baseline score is zero."""


class MissingPostScore(MorphogateError):
    """Improvement rate requested but the postoperative score is absent."""


class SingleClassCohort(MorphogateError):
    """Class balancing requires both outcome classes to be present."""


class EmptyClass(MorphogateError):
    """A classification metric is undefined because one class has no members."""


class EmptyInput(MorphogateError):
    """Metric requested over an empty prediction set."""


# ---------------------------------------------------------------------------
# synthetic cohorts

class SpecInvalid(MorphogateError):
    """Cohort specification violates a constraint."""


class NonPositiveJacobianRequested(MorphogateError):
    """Analytic warp parameters would produce a nonpositive Jacobian somewhere."""
