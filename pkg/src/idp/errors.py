"""Exception types shared across the package."""


class IdpError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(IdpError):
    """Operands have incompatible shapes."""


class SingularSystem(IdpError):
    """A linear system that must be solved is numerically singular."""


class NonFiniteGradient(IdpError):
    """A gradient check encountered NaN or infinite gradients."""


class BadMagic(IdpError):
    """Container file does not start with the expected magic bytes."""


class VersionUnsupported(IdpError):
    """Container file declares a format version this reader does not know."""


class CorruptRecord(IdpError):
    """Container payload is truncated or internally inconsistent."""


class NonFiniteFeature(IdpError):
    """Container payload decodes to NaN or infinite feature values."""


class IoFailure(IdpError):
    """Underlying I/O operation failed."""


class InsufficientSamples(IdpError):
    """Dataset cannot supply the requested episode sizes."""


class EmptyBank(IdpError):
    """Prototype bank holds no vectors."""


class EmptyBatch(IdpError):
    """Statistics requested over an empty batch."""


class DivergedLoss(IdpError):
    """Training loss became NaN or infinite."""


class UnpairedInput(IdpError):
    """Paired-sample operation received domains of different sizes."""


class ConfigError(IdpError):
    """Run configuration is missing, malformed, or references bad paths."""
