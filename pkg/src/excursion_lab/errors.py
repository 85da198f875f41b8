"""Exception types raised across the package."""


class ExcursionLabError(Exception):
    """Base class for all package errors."""


class EmbeddingNotPSD(ExcursionLabError):
    """Circulant embedding has an eigenvalue below ``-tau * max``."""


class MismatchedGrids(ExcursionLabError):
    """Two samples that must share a grid and model do not."""


class DegenerateConstraintSet(ExcursionLabError):
    """Constraint covariance is singular or badly conditioned."""


class DegenerateCovariance(ExcursionLabError):
    """A Gaussian vector has a non positive definite covariance."""


class DomainOutsideGrid(ExcursionLabError):
    """A requested sub-box or annulus leaves the sampled grid."""


class LevelAtCriticalValue(ExcursionLabError):
    """A critical value collides with the level; jitter the level."""


class BadScale(ExcursionLabError):
    """Scales violate the divisibility constraints."""


class BufferTooSmall(ExcursionLabError):
    """Buffer is too thin for the unbounded-component proxy."""


class NotStabilized(ExcursionLabError):
    """Topological derivative differs under refinement or box growth."""


class DegenerateVariance(ExcursionLabError):
    """Estimated variance is numerically zero."""


class ConfigInvalid(ExcursionLabError):
    """Experiment configuration failed validation."""


class MissingOutputs(ExcursionLabError):
    """A manifest points at files that do not exist."""
