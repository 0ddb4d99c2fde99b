"""Exception hierarchy shared across the package."""


class GpssmError(Exception):
    """Base class for all package errors."""


class NumericalError(GpssmError, ArithmeticError):
    """A numerical routine produced an unusable result."""


class NotFactorizable(NumericalError):
    pass


class AsymmetricInput(GpssmError, ValueError):
    pass


class DimensionMismatch(GpssmError, ValueError):
    pass


class NonFiniteGradient(NumericalError):
    def __init__(self, path):
        super().__init__(f"non-finite gradient at {path}")
        self.path = path


class NonFiniteObjective(NumericalError):
    def __init__(self, term):
        super().__init__(f"non-finite value in ELBO term {term!r}")
        self.term = term


class DegenerateR(GpssmError, ValueError):
    pass


class ConfigError(GpssmError, ValueError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line


class SchemaMismatch(ConfigError):
    pass


class DegenerateColumn(ConfigError):
    pass
