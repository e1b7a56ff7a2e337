"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf value was produced or supplied at an op boundary."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration object failed validation.

    ``field`` names the offending field when one can be singled out.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class CheckpointError(ValueError):
    """A checkpoint container could not be read back."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""
