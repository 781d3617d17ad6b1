"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class EmptyInputError(ShapeError):
    """An operator received a zero-length sequence where it needs at least one row."""


class ConfigError(ValueError):
    """A configuration or weight set is inconsistent."""


class MaskError(ArithmeticError):
    """A softmax row was fully masked, which would produce NaN."""
