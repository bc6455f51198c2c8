"""Exception hierarchy. CLI exit codes hang off these classes."""


class CurriDPOError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class InvalidInputError(CurriDPOError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(CurriDPOError, ValueError):
    exit_code = 2


class DataValidationError(CurriDPOError, ValueError):
    exit_code = 3


class DataFormatError(DataValidationError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class UnsupportedOperationError(CurriDPOError, TypeError):
    pass


class UnsupportedScaleError(CurriDPOError, RuntimeError):
    pass
