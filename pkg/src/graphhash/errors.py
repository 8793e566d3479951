"""Exception hierarchy shared by the library and the command line."""


class GraphHashError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(GraphHashError):
    exit_code = 1


class DataError(GraphHashError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    pass


class NumericError(GraphHashError):
    """Raised when training diverges (NaN/inf loss) or a numeric precondition fails."""

    exit_code = 3
