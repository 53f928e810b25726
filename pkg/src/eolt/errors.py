"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; message reports both shapes."""


class UnsupportedSizeError(ValueError):
    """Image too small for a transform's kernel/crop footprint."""


class InfeasibleCapError(ValueError):
    """Probability cap below 1/n cannot yield a valid distribution."""


class ConfigError(ValueError):
    """Malformed experiment configuration or report input."""


class NonFiniteError(FloatingPointError):
    """A gradient or output became NaN/Inf; message names the site."""
