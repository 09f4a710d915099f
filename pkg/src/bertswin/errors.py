"""Exception types shared across the package."""


class BertsWinError(Exception):
    """Base class for package errors."""


class ConfigError(BertsWinError, ValueError):
    """Invalid configuration or argument value."""


class DimensionError(BertsWinError, ValueError):
    """Tensor shapes do not satisfy an operation's requirements."""


class ContractError(BertsWinError, ValueError):
    """An operation's precondition was violated."""
