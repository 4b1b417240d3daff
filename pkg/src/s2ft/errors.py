"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes (see ``s2ft.cli``).
"""


class S2FTError(Exception):
    """Base class for all engine errors."""


class ShapeError(S2FTError, ValueError):
    """Operand dimensions do not agree."""


class ArgumentError(S2FTError, ValueError):
    """An argument is outside its documented domain."""


class ConfigError(S2FTError, ValueError):
    """A model or experiment configuration is invalid."""


class NumericError(S2FTError, ArithmeticError):
    """Non-finite values or an iterative method failed to converge."""


class StateError(S2FTError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class IntegrityError(S2FTError, RuntimeError):
    """Stored data does not match what it claims to be derived from."""


class PreconditionError(S2FTError, ValueError):
    """A modelling hypothesis required by a theory routine does not hold."""


class LookupFailure(S2FTError, KeyError):
    """A registry lookup failed."""
