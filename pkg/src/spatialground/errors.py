"""Exception hierarchy shared by all modules.

Every error raised on a contract violation derives from PipelineError so
callers can catch the package's failures with a single except clause while
tests assert on the specific class.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(PipelineError):
    """A document could not be parsed at all (malformed syntax)."""


class ValidationError(PipelineError):
    """A parsed document or constructed value violates an invariant.

    The message names the offending field.
    """


class DataIoError(PipelineError):
    """A file could not be read or written."""


class DimensionMismatch(PipelineError):
    """Image or array dimensions differ from the declared ones."""


class EmptyCloud(PipelineError):
    """Backprojection or denoising left no valid 3D points."""


class DegenerateCloud(PipelineError):
    """Too few or rank-deficient points for a PCA box fit."""


class SchemaMismatch(PipelineError):
    """Feature vector schema differs from what the model expects."""


class EmptyBatch(PipelineError):
    """A loss/gradient computation received no samples."""


class EmptyDataset(PipelineError):
    """A training or evaluation run received no samples."""


class ModelFormatError(PipelineError):
    """A model file is structurally unreadable."""


class VersionMismatch(ModelFormatError):
    """Model file version is not supported by this build."""


class CorruptModel(ModelFormatError):
    """Model file is truncated or fails its checksum."""


class NoCandidates(PipelineError):
    """No detector candidate survived selection for one role."""

    def __init__(self, role: str, message: str = ""):
        self.role = role
        super().__init__(message or f"no candidates for role '{role}'")


class NoValidPairs(PipelineError):
    """Every (target, reference) pair was excluded from ranking."""


class PlacementFailure(PipelineError):
    """Synthetic scene generator could not place objects without overlap."""


class LengthMismatch(PipelineError):
    """Two aligned sequences have different lengths."""


class EmptySet(PipelineError):
    """A metric was requested over zero samples."""
