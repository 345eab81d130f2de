"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError exits 2, everything else
raised at runtime exits 1.
"""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class DatasetError(RuntimeError):
    """Dataset directory or contents unusable."""


class CheckpointError(RuntimeError):
    """Checkpoint file missing, corrupt, or incompatible."""
