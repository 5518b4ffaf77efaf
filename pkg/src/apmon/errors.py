"""Exception hierarchy shared across the package."""


class ApmonError(Exception):
    """Base class for all package errors."""


class InvalidModel(ApmonError):
    pass


class UndefinedDfaTransition(InvalidModel):
    pass


class ScenarioError(ApmonError):
    pass


class ParseError(ScenarioError):
    pass


class SchemaError(ScenarioError):
    pass


class ValidationError(ScenarioError):
    """Invariant violation in a scenario file; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ConfigError(ApmonError):
    pass


class ZeroLikelihood(ApmonError):
    """An observation with zero probability under the current posterior."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ModelMismatch(ApmonError):
    pass


class DomainError(ApmonError, ValueError):
    pass


class EmptySample(ApmonError):
    pass


class VariantMismatch(ApmonError):
    pass


class NonFiniteGradient(ApmonError):
    pass


class LengthMismatch(ApmonError, ValueError):
    pass


class DegenerateGap(ApmonError):
    pass


class EmptyEvaluation(ApmonError):
    pass


class TooLarge(ApmonError):
    pass
