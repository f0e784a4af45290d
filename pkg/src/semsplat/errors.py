"""Exception hierarchy shared across the library and the CLI.

The CLI maps these onto distinct exit codes, so keep the categories coarse:
configuration problems, file-format problems, numerical divergence, and
plain misuse of the API.
"""


class SemsplatError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(SemsplatError):
    """Non-finite or otherwise unusable numeric input."""


class DegenerateGaussianError(SemsplatError):
    """Covariance of a Gaussian is singular or non-finite."""


class ConfigurationError(SemsplatError):
    """Inconsistent configuration: dimension mismatches, bad hyperparameters."""


class FormatError(SemsplatError):
    """A file does not conform to one of the documented container formats."""


class UsageError(SemsplatError):
    """API misuse, e.g. a backward pass without a cached forward pass."""


class AnnotationError(SemsplatError):
    """Ground-truth annotation is degenerate or out of bounds."""


class TrainingError(SemsplatError):
    """Training cannot proceed (e.g. empty Gaussian selection)."""


class DivergenceError(SemsplatError):
    """A loss or parameter became non-finite during optimization."""
