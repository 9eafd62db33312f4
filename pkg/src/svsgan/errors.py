class ValidationError(ValueError):
    """Input violates a documented invariant."""


class DimensionError(ValidationError):
    """Tensor shapes or channel counts do not agree."""


class ConfigError(ValidationError):
    """Configuration is inconsistent with parameters, data or schema."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite or out-of-tolerance values."""
