"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when a computation produces or receives non-finite values."""


class ContractError(RuntimeError):
    """Raised when an API precondition is violated."""


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


class RoutingError(ValueError):
    """Raised when top-k routing cannot select the requested number of experts."""
