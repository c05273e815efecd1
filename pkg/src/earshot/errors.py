"""Exception hierarchy shared by all earshot modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
FormatError subclass) -> 3, NumericError -> 4.
"""


class EarshotError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EarshotError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(EarshotError):
    """A configuration value is invalid or inconsistent."""


class DataError(EarshotError):
    """Input data is missing, malformed or violates a precondition."""


class FormatError(DataError):
    """A binary or text file does not match its declared format."""


class PreconditionError(EarshotError):
    """A documented operation precondition was violated by the caller."""


class NumericError(EarshotError):
    """A NaN/Inf appeared where every value must stay finite."""
