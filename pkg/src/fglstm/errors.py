"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class FglstmError(Exception):
    """Base class for all package errors."""


class ConfigError(FglstmError):
    """Invalid configuration value or file (exit code 2)."""


class DataError(FglstmError):
    """Malformed or inconsistent input data (exit code 3)."""


class DimensionError(DataError):
    """Operand shapes do not agree."""


class EmptySequenceError(DataError):
    """A training sequence must contain at least one timestep."""


class OrderingError(DataError):
    """Window times must be strictly increasing."""


class StatsError(DataError):
    """Standardization statistics cannot be built (unobserved or constant feature)."""


class UndefinedMetricError(DataError):
    """A ranking metric needs both classes (or at least one positive) present."""


class NumericalError(FglstmError):
    """Numerical failure: divergence, equivalence violation (exit code 4)."""


class TrainingDivergedError(NumericalError):
    """Loss became non-finite during training."""


class FormatError(DataError):
    """Serialized container has the wrong format tag or version."""


class UntrainedModelError(FglstmError):
    """Operation requires a trained model."""
