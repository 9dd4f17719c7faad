"""Exception hierarchy shared by every module."""


class GsmnError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(GsmnError, ValueError):
    pass


class NumericError(GsmnError, ArithmeticError):
    pass


class ConfigurationError(GsmnError, ValueError):
    pass


class ContractError(GsmnError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ParseError(GsmnError, ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ReferentialIntegrityError(GsmnError, ValueError):
    pass


class GraphError(GsmnError, ValueError):
    pass


class CheckpointError(GsmnError, IOError):
    pass
