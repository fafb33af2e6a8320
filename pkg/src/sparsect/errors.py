"""Exception types shared across the package."""


class SparsectError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(SparsectError, ValueError):
    """Tensor/image shapes are incompatible with the requested operation."""


class ParameterError(SparsectError, ValueError):
    """An argument value is outside the operation's domain."""


class NumericError(SparsectError, ArithmeticError):
    """Non-finite values where the computation requires finite ones."""


class GraphError(SparsectError, RuntimeError):
    """A network graph contract is violated (unresolved shapes, bad input size)."""


class FormatError(SparsectError, ValueError):
    """A file on disk does not match its declared binary/JSON format."""


class ConfigError(SparsectError, ValueError):
    """A run configuration fails schema validation."""
