"""Exception hierarchy shared by all bbfit modules."""


class BBFitError(Exception):
    """Base class for errors raised by bbfit."""


class InvalidParameterError(BBFitError, ValueError):
    """A distribution parameter lies outside its parameter space."""


class SupportError(BBFitError, ValueError):
    """A response value lies outside the support of the family."""


class DegenerateRangeError(BBFitError, ValueError):
    """A covariate has zero range, so no knot grid can be placed on it."""


class DimensionError(BBFitError, ValueError):
    """Matrix or vector dimensions are inconsistent."""


class SingularSystemError(BBFitError, ArithmeticError):
    """A penalized normal-equation system could not be factorized."""


class FitError(BBFitError, RuntimeError):
    """The fitting loop failed; carries the offending term where known."""

    def __init__(self, message, term=None):
        if term is not None:
            message = f"term {term}: {message}"
        super().__init__(message)
        self.term = term


class StoreError(BBFitError, OSError):
    """Problems reading, writing or ingesting a column store."""


class CSVParseError(StoreError, ValueError):
    """A CSV cell could not be parsed; ``row`` and ``column`` locate it."""

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class NonNumericColumnError(CSVParseError):
    """A CSV column holds non-numeric (e.g. categorical) data."""


class ConfigError(BBFitError, ValueError):
    """A run configuration failed schema validation."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
