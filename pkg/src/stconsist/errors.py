"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class ConfigError(ValueError):
    """Invalid experiment or scene configuration."""


class NumericError(ArithmeticError):
    """Training produced a non-finite value."""


class GenerationError(RuntimeError):
    """Scene generation could not place objects within the retry budget."""


class RendererError(RuntimeError):
    """A camera ray left the closed room."""


class ChecksumError(IOError):
    """A stored artifact does not match its recorded digest."""
