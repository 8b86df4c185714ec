"""Exception classes shared across the package.

Each class maps to a distinct CLI exit code.
"""


class FoilError(Exception):
    exit_code = 1


class ConfigError(FoilError, ValueError):
    exit_code = 2


class DataError(FoilError, ValueError):
    exit_code = 3


class NumericError(FoilError, ArithmeticError):
    exit_code = 4


class UsageError(FoilError, RuntimeError):
    exit_code = 5
