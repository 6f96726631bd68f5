"""Exception hierarchy shared by every module.

The CLI maps each family onto a distinct exit code.
"""


class MdnetError(Exception):
    """Base class for all package errors."""


class ShapeError(MdnetError, ValueError):
    pass


class ParameterError(MdnetError, ValueError):
    pass


class SpecError(MdnetError, ValueError):
    """A NetworkSpec (or GAN config) is structurally invalid."""


class BatchError(MdnetError, ValueError):
    pass


class LabelError(MdnetError, ValueError):
    pass


class DataError(MdnetError, ValueError):
    """Empty or inconsistent datasets."""


class ParseError(MdnetError, ValueError):
    """Malformed input file. Carries the 1-based line number when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class SchemaError(ParseError):
    pass


class InternalError(MdnetError, RuntimeError):
    pass
