"""Exception hierarchy shared by every subpackage.

The CLI maps each family to its own exit code, so raise the most specific
class that applies.
"""


class PlaceRecError(Exception):
    """Base class for all errors raised by placerec."""


class ConfigError(PlaceRecError, ValueError):
    """Invalid configuration or violated precondition on parameters."""


class DataError(PlaceRecError, ValueError):
    """Malformed, missing, or inconsistent input data."""


class NumericError(PlaceRecError, ArithmeticError):
    """A NaN or infinity appeared during a forward or backward pass."""
