"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    pass


class NumericalDomainError(ArithmeticError):
    """Input lies outside the domain where a formula is finite (e.g. a tan pole)."""


class GenotypeParseError(ValueError):
    def __init__(self, field, reason):
        self.field = field
        super().__init__(f"{field}: {reason}")


class FrozenWeightsViolation(RuntimeError):
    """A parameter block that should be frozen changed."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class ConfigError(ValueError):
    pass
