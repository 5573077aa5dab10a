"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see ``mfgraph.cli``).
"""


class MFGraphError(Exception):
    exit_code = 1


class SchemaError(MFGraphError, ValueError):
    """A record or file does not match the expected layout."""

    exit_code = 3


class RecordParseError(SchemaError):
    """A line could not be decoded as a feature record."""

    def __init__(self, message, line_number=None, path=None):
        self.line_number = line_number
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line_number is not None:
            where += f"{line_number}: "
        super().__init__(where + message)


class DataError(MFGraphError, ValueError):
    """The data is valid but unusable for the requested operation."""

    exit_code = 4


class StratificationError(DataError):
    pass


class NotAPEError(DataError):
    pass


class CompatibilityError(MFGraphError, ValueError):
    """A checkpoint or cache does not fit the model/config it is used with."""

    exit_code = 5
