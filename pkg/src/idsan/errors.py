"""Exception hierarchy.

Errors split into two families so the CLI can map them to exit codes:
``DataError`` (bad inputs, exit 2) and ``NumericalError`` (exit 3).
"""


class IdsanError(Exception):
    """Base class for all toolkit errors."""


class DataError(IdsanError):
    pass


class NumericalError(IdsanError):
    pass


class FormatError(DataError):
    pass


class UnsupportedVersion(FormatError):
    pass


class MetadataError(DataError):
    pass


class SplitViolation(DataError):
    pass


class InsufficientImages(DataError):
    pass


class DimError(DataError):
    pass


class EmptyImpostors(DataError):
    pass


class EmptyInput(DataError):
    pass


class InvalidGrid(DataError):
    pass


class InvalidK(DataError):
    pass


class DegenerateTask(DataError):
    pass


class MissingTruth(DataError):
    pass


class DegenerateBox(DataError):
    pass


class CalibrationLeak(DataError):
    """An operating point calibrated on test scores was used for evaluation."""


class DegenerateVector(NumericalError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class DegenerateFit(NumericalError):
    pass


class RankDeficient(NumericalError):
    def __init__(self, message: str, matrix_rank: int):
        super().__init__(message)
        self.matrix_rank = matrix_rank


class InvalidBasis(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class TrainingDiverged(NumericalError):
    pass


class UndefinedRetention(NumericalError):
    pass


class Unreachable(NumericalError):
    def __init__(self, message: str, max_ratio: float):
        super().__init__(message)
        self.max_ratio = max_ratio
