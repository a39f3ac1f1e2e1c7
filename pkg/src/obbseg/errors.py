"""Exception types raised across the package."""


class ObbsegError(Exception):
    """Base class for all package errors."""


class InvalidArgument(ObbsegError, ValueError):
    pass


class DegenerateGeometry(ObbsegError, ValueError):
    """Point set too small or collinear to span an area."""


class InvalidAnnotation(ObbsegError, ValueError):
    pass


class InvalidConfig(ObbsegError, ValueError):
    pass


class InvalidState(ObbsegError, RuntimeError):
    pass


class ParseError(ObbsegError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownClass(ParseError):
    pass


class FormatError(ObbsegError, ValueError):
    pass


class PlacementError(ObbsegError, RuntimeError):
    pass
