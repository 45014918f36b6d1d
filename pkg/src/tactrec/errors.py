"""Shared exception types."""


class InvalidArgument(ValueError):
    """A public operation was called with an argument outside its domain."""


class ContractViolation(RuntimeError):
    """A documented precondition of an operation was violated by the caller."""


class PlacementInfeasible(RuntimeError):
    """Object placement rejection sampling exhausted its retry budget."""


class EnvironmentFault(RuntimeError):
    """The environment reached a state its setup contract rules out."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class TraceFormatError(ValueError):
    """An episode trace file has an unknown version or a malformed record."""
