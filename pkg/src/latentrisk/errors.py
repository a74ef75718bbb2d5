"""Exception and warning types shared across the package."""


class LatentRiskError(Exception):
    """Base class for all package errors."""


class ConfigError(LatentRiskError, ValueError):
    """Invalid configuration or hyperparameter space."""


class InputError(LatentRiskError, ValueError):
    """Input data violates an operation's preconditions."""


class SchemaError(LatentRiskError, ValueError):
    """Shapes, variable ids or row counts do not match."""


class TrainingError(LatentRiskError, ValueError):
    """Model cannot be fitted on the given data."""


class UndefinedMetricError(LatentRiskError, ValueError):
    """Metric is undefined for the given labels (e.g. one class only)."""


class ModelArtifactError(LatentRiskError, ValueError):
    """A persisted or in-memory model lacks required metadata."""


class MissingArtifactError(LatentRiskError, FileNotFoundError):
    """An upstream pipeline artifact is missing."""


class RankReductionWarning(UserWarning):
    """Requested number of components exceeds the numerical rank."""


class ConvergenceWarning(UserWarning):
    """Iterative fit stopped before reaching tolerance."""


class StalenessWarning(UserWarning):
    """Upstream artifact was produced under a different configuration."""
