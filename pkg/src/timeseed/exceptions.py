"""Exception hierarchy shared by all timeseed modules."""


class TimeseedError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(TimeseedError, ValueError):
    """Array shapes or ensemble counts do not match the parameters."""


class InvalidArgumentError(TimeseedError, ValueError):
    """An argument is outside its documented domain."""


class UnsupportedConfigurationError(TimeseedError, ValueError):
    """A closed-form routine was called outside the configuration it covers."""


class OutOfDomainError(TimeseedError, ValueError):
    """A formula is invalid for the given parameters (e.g. vanishing denominator)."""


class InvalidBracketError(TimeseedError, ValueError):
    """A bisection bracket does not straddle the transition."""


class NumericalFailureError(TimeseedError, ArithmeticError):
    """NaN or overflow appeared during a computation."""


class IntegrationBudgetError(TimeseedError, RuntimeError):
    """The step budget ran out before ``t_end``.

    The samples produced so far are kept on :attr:`partial`.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ResourceError(TimeseedError, MemoryError):
    """A matrix would exceed the configured size cap."""


class SolverError(TimeseedError, RuntimeError):
    """An iterative eigensolver did not converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(TimeseedError, ValueError):
    """A persisted file is malformed or has an unsupported version."""


class ConfigError(TimeseedError, ValueError):
    """A run configuration failed validation.

    ``path`` names the offending field, e.g. ``ensembles[1].kappa``.
    """

    def __init__(self, message, path=None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
