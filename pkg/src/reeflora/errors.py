"""Exception hierarchy. Everything raised on purpose derives from ReefError."""


class ReefError(Exception):
    pass


class ShapeError(ReefError, ValueError):
    """Operand dimensions do not fit the operation."""


class GeometryError(ReefError, ValueError):
    """Image or tile geometry does not fit (divisibility, size, bounds)."""


class ConfigError(ReefError, ValueError):
    """Invalid configuration value or unknown key."""


class ContractError(ReefError, ValueError):
    """A documented precondition was violated by the caller."""


class DataError(ReefError):
    """Unreadable or inconsistent data on disk."""


class TrainingError(ReefError):
    """Training could not continue (e.g. non-finite loss)."""
