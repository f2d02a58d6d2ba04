"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A NaN or infinite value appeared where finite values are required."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


class ConfigError(ValueError):
    """Invalid configuration. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class FormatError(ValueError):
    """A binary container is malformed. ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class ProbeError(RuntimeError):
    """A timing measurement could not be taken reliably."""
