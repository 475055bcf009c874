"""Exception hierarchy shared by the library and the CLI exit codes."""


class MotsError(Exception):
    """Base class for all library errors."""


class ConfigError(MotsError, ValueError):
    """Invalid configuration or argument (CLI exit code 2)."""


class DataError(MotsError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class FormatError(DataError):
    """A file does not follow its binary layout."""


class NumericError(MotsError, ArithmeticError):
    """Non-finite values during optimization (CLI exit code 4)."""
