"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataIOError -> 3, NumericError -> 4.
"""


class SarcnetError(Exception):
    """Base class for all package errors."""


class DimensionError(SarcnetError):
    """Shapes or sizes are incompatible for an operation."""


class DegenerateInputError(SarcnetError):
    """Input is structurally valid but too degenerate to process
    (empty batch, constant region, sub-minimal mask, ...)."""


class ManifestError(SarcnetError):
    """A dataset manifest could not be parsed."""


class CheckpointError(SarcnetError):
    """A checkpoint file is corrupt, truncated, or version-incompatible."""


class OptimizerError(SarcnetError):
    """Optimizer received unusable gradients."""


class NumericError(SarcnetError):
    """A numeric failure (NaN/Inf) occurred during computation."""


class ConfigError(SarcnetError):
    """Invalid configuration or mutually inconsistent settings."""


class DataIOError(SarcnetError):
    """File input/output failed."""
