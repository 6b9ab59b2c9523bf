"""Exception hierarchy shared across the package.

The CLI maps each family onto an exit code, so new errors should derive from
one of the three roots below.
"""


class ConfigError(ValueError):
    """Invalid configuration or inconsistent dimensions."""


class DataError(ValueError):
    """Malformed or unusable input data."""


class NumericalError(ArithmeticError):
    """A numerical invariant was violated (CFL, density bounds, NaN loss)."""


class DimensionError(ConfigError):
    pass


class DomainError(NumericalError):
    """An argument lies outside the domain where a formula is defined."""


class CflViolation(NumericalError):
    """Reaction rates reached or exceeded 1/2."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class CsvFormatError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""
