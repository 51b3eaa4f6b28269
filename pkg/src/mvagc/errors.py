class MvagcError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MvagcError, ValueError):
    pass


class DomainError(MvagcError, ValueError):
    pass


class ParseError(MvagcError):
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


class EncodingError(MvagcError):
    pass


class SplitError(MvagcError):
    pass


class NonFiniteError(MvagcError, FloatingPointError):
    """Raised when a loss or gradient stops being finite."""
