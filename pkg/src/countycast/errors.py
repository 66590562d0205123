"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class CountycastError(Exception):
    exit_code = 1


class ConfigError(CountycastError):
    exit_code = 2


class DataError(CountycastError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    """Missing columns, unknown types, or too many rejected rows."""


class DegenerateInputError(DataError):
    """Input is valid in shape but carries no information (constant, all-zero)."""


class NumericFault(CountycastError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConvergenceError(NumericFault):
    pass
