"""Exception hierarchy shared across the toolkit."""


class SensitivityError(Exception):
    """Base class for all errors raised by bnpsens."""


class DimensionError(SensitivityError, ValueError):
    pass


class DomainError(SensitivityError, ValueError):
    pass


class NumericError(SensitivityError, ArithmeticError):
    """A non-finite value appeared. ``index`` names the offending term, if known."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SingularityError(SensitivityError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InsufficientSamplesError(SensitivityError, ValueError):
    pass


class DiagnosticsError(SensitivityError, RuntimeError):
    pass


class BracketError(SensitivityError, RuntimeError):
    pass


class NoisyObjectiveError(SensitivityError, RuntimeError):
    pass


class NonIdentifiedError(SensitivityError, RuntimeError):
    pass


class ConvexityError(SensitivityError, RuntimeError):
    pass


class ConfigError(SensitivityError, ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in self.errors))
