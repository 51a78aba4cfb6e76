"""Exception hierarchy.

Every error raised on purpose by the package derives from ``MotfmError`` so
callers (and the CLI) can tell modelling failures from programming bugs.
The CLI maps ``DataError`` subclasses to exit status 2 and
``NumericalError`` subclasses to exit status 3.
"""


class MotfmError(Exception):
    pass


class DataError(MotfmError, ValueError):
    """Invalid or inconsistent input data."""


class DimensionError(DataError):
    pass


class ModeIndexError(DataError, IndexError):
    pass


class PartitionError(DataError):
    pass


class AlignmentError(DataError):
    pass


class ThreadError(DataError):
    pass


class RankError(DataError):
    pass


class BudgetError(DataError):
    pass


class FormatError(DataError):
    pass


class ConfigurationError(DataError):
    pass


class NumericalError(MotfmError, ArithmeticError):
    pass


class CollinearityError(NumericalError):
    pass


class StationarityError(NumericalError):
    pass


class UndefinedMetricError(NumericalError):
    pass


class StageError(MotfmError):
    """Wraps an error raised inside one stage of :func:`motfm.estimation.fit`."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
