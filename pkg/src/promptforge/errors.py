"""Exception hierarchy shared across the package.

Every error raised on purpose derives from PromptForgeError so the CLI can
catch one type at its boundary and map it to an exit code.
"""


class PromptForgeError(Exception):
    """Base class for all deliberate failures."""


class NonFiniteInput(PromptForgeError):
    """A value that must be finite was NaN or infinite."""


class ShapeMismatch(PromptForgeError):
    """An array had the wrong rank, axis length, or dtype."""


class TapeMismatch(PromptForgeError):
    """A backward call received arrays inconsistent with its tape."""


class AffineSingular(PromptForgeError):
    """The 2x2 linear part of an affine matrix is not invertible."""


class ScaleOutOfRange(PromptForgeError):
    """A baseline scale fell outside (0, 1)."""


class ConfigError(PromptForgeError):
    """A configuration value is out of range, unknown, or inconsistent."""


class CheckFailure(PromptForgeError):
    """A self-check (e.g. embedding equivalence) exceeded its tolerance."""


class TensorFileError(PromptForgeError):
    """Base class for tensor container read/write failures."""


class BadMagic(TensorFileError):
    """A binary file does not start with the expected magic bytes."""


class VersionMismatch(TensorFileError):
    """The container version is not one this reader understands."""


class TruncatedPayload(TensorFileError):
    """The file ended before the declared payload was read."""


class DuplicateName(TensorFileError):
    """Two entries in one container share a name."""


class DataError(PromptForgeError):
    """Base class for dataset construction and ingestion failures."""


class BadClassCount(DataError):
    """Requested class count outside the supported range."""


class DimensionMismatch(DataError):
    """An IDX file declared dimensions that do not match its kind."""


class CountMismatch(DataError):
    """Image and label files disagree on sample count."""


class DegenerateSplit(DataError):
    """A split came out empty or lost a class entirely."""


class EmptySplit(DataError):
    """An operation requiring samples received an empty split."""


class ClassMismatch(DataError):
    """Model class count disagrees with dataset labels."""


class EmptyKinds(PromptForgeError):
    """A corruption sweep was requested with no corruption kinds."""


class DidNotConverge(PromptForgeError):
    """Training finished below its target accuracy (reported, not fatal)."""
