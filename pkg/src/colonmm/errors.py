"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
DivergenceError -> 3.
"""


class ColonmmError(Exception):
    """Base class for all package errors."""


class UsageError(ColonmmError):
    """Invalid arguments, missing inputs, or misconfigured runs."""


class DataError(ColonmmError):
    """Malformed or contract-violating data."""


class ParseError(DataError):
    """A file or generated text could not be parsed."""


class SpliceError(DataError):
    """Image placeholder missing or duplicated in a multimodal sequence."""


class ShapeError(DataError):
    """Array shapes inconsistent with the declared configuration."""


class NumericError(ColonmmError):
    """A numeric routine produced non-finite values."""


class DivergenceError(ColonmmError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
