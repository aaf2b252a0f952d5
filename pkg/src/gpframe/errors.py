"""Exception hierarchy.

Every error raised by the library derives from :class:`GPFrameError`.  The
three intermediate classes map onto the CLI exit codes: configuration
problems exit 2, data problems exit 3, numerical failures exit 4.
"""


class GPFrameError(Exception):
    exit_code = 1


class ConfigError(GPFrameError):
    exit_code = 2


class DataError(GPFrameError):
    exit_code = 3


class NumericalError(GPFrameError):
    exit_code = 4


# kernels / DSL
class KernelSyntaxError(ConfigError):
    def __init__(self, message, position=None, text=None):
        self.position = position
        self.text = text
        if position is not None:
            message = f"{message} at position {position}"
        super().__init__(message)


class UnknownFeature(ConfigError):
    pass


class UnknownKernel(ConfigError):
    pass


class ArityError(ConfigError):
    pass


class LengthMismatch(ConfigError, ValueError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class NonFiniteInput(DataError, ValueError):
    pass


# gp core / training
class NotPositiveDefinite(NumericalError):
    pass


class SizeCapExceeded(ConfigError):
    pass


class NoConvergence(NumericalError):
    pass


class NonFiniteObjective(NumericalError):
    pass


class DegenerateData(DataError):
    pass


# transforms
class DegenerateColumn(DataError):
    pass


class NonPositiveAfterShift(DataError):
    pass


class DomainError(DataError):
    pass


class LeakageError(DataError):
    """A transform fitted on one training set was reused to fit on another."""


# data
class MissingColumn(ConfigError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        super().__init__(f"{message} (row {row}, column {column!r})")


class EmptyDataset(DataError):
    pass


class MissingTrackIds(ConfigError):
    pass


class TooFewTracks(DataError):
    pass


class KTooLarge(ConfigError):
    pass


class NoSpatialFeatures(ConfigError):
    pass


class SchemaMismatch(DataError):
    pass


# scaling
class AllChunksFailed(NumericalError):
    pass


class EigenFailure(NumericalError):
    pass


# baselines
class RankDeficient(NumericalError):
    def __init__(self, message, columns=()):
        self.columns = tuple(columns)
        super().__init__(f"{message}: columns {list(self.columns)}")
