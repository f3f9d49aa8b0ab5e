"""Exception hierarchy shared by every module.

The CLI maps these classes onto exit codes, so new failure modes should
subclass one of them rather than raising bare builtins.
"""


class PucareError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(PucareError, ValueError):
    """An argument is outside its allowed range."""


class ShapeError(PucareError, ValueError):
    """Tensor or array shapes are incompatible."""


class DataError(PucareError):
    """Input data violates a contract (missing files, non-binary masks, ...)."""


class FormatError(DataError):
    """A persisted file does not have the expected layout."""


class VersionError(FormatError):
    """A persisted file has an unsupported format version."""


class CorruptionError(FormatError):
    """A persisted file is truncated or its contents fail validation."""


class SkipAugmentation(PucareError):
    """The augmentation does not apply to this sample; the caller omits it."""


class VerificationError(PucareError):
    """A verification suite (gradient check, acceptance) failed."""


class FileReadError(DataError, OSError):
    """A file could not be opened or decoded."""
