"""Exception hierarchy shared by every eggloc module."""


class EgglocError(Exception):
    """Base class for all errors raised by eggloc."""


class ValidationError(EgglocError, ValueError):
    """An input violates a documented precondition or type invariant."""


class DegenerateBoxError(ValidationError):
    """A box collapsed to zero (or negative) area."""


class SchemaError(ValidationError):
    """A structured input file does not match the expected document shape."""


class CapabilityError(EgglocError, RuntimeError):
    """The backend lacks a capability the requested operation needs."""


class BackendUnavailableError(EgglocError, RuntimeError):
    """A backend was selected but its runtime cannot be loaded."""


class HarnessError(EgglocError, RuntimeError):
    """A test double was asked for something it was not scripted with."""
