"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericError -> 4.
"""


class GediError(Exception):
    pass


class DimensionError(GediError):
    """Shape mismatch between operands."""


class NumericError(GediError):
    """An operation produced non-finite values."""


class UsageError(GediError):
    """API misuse, e.g. backward on an untaped tensor."""


class ConfigError(GediError):
    """Invalid configuration or command-line arguments."""


class DataError(GediError):
    """Problems with the input data itself."""


class SchemaError(DataError):
    """Data does not conform to the declared schema."""


class ParseError(DataError):
    """Cell text could not be parsed for its declared kind."""
