"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class GeometryError(ValueError):
    """Convolution geometry is invalid (empty output, bad coordinate, ...)."""


class ConfigError(ValueError):
    """A configuration value is outside the supported set."""


class DataError(ValueError):
    """Dataset files are missing, truncated, or malformed."""


class LabelError(ValueError):
    """A class label is outside the valid range."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries epoch/step context."""
