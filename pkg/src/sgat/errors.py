"""Exception hierarchy shared by every sgat module."""


class SgatError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SgatError, ValueError):
    """Operand dimensions are incompatible."""


class DomainError(SgatError, ValueError):
    """A value lies outside the domain of a function (log of 0, u == 1, ...)."""


class StructuralError(SgatError, ValueError):
    """A graph, mask or checkpoint is internally inconsistent."""


class ContractError(SgatError, RuntimeError):
    """A precondition on how an API is called was violated."""


class InputError(SgatError, ValueError):
    """Malformed user-supplied data (files, ids, fractions)."""


class ConfigError(SgatError, ValueError):
    """A model or training configuration is invalid."""
