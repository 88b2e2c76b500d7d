"""Few-shot cross-domain adaptation via ridge reconstruction from a
clustered source-prototype pool, with normalization-statistics alignment.
"""

from .errors import (
    BadMagic,
    ConfigError,
    CorruptRecord,
    DimensionMismatch,
    DivergedLoss,
    EmptyBank,
    EmptyBatch,
    IdpError,
    InsufficientSamples,
    IoFailure,
    NonFiniteFeature,
    NonFiniteGradient,
    SingularSystem,
    UnpairedInput,
    VersionUnsupported,
)

__version__ = "0.1.0"
