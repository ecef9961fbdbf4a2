"""Shared exception types."""


class ContractViolation(ValueError):
    """An argument or state violated a documented precondition."""


class SpecError(ContractViolation):
    """A cyclization spec could not be constructed from the given arguments."""


class ParseError(ValueError):
    """A record file is malformed; message carries the line number."""


class NumericError(ArithmeticError):
    """A numeric routine produced non-finite values or failed to converge."""


class TrainingDivergence(NumericError):
    """Optimizer received non-finite gradients."""


class InvariantViolation(RuntimeError):
    """Internal state broke a maintained invariant (sampler timers, anchors)."""


class ConfigError(ValueError):
    """A configuration key, value, or combination is not acceptable."""
