"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or mismatched shapes between components."""


class ContractViolation(ValueError):
    """A function was called outside its documented preconditions."""


class FormatError(ValueError):
    """A binary file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""
