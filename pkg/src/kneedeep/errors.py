"""Exception types raised by the kneedeep library.

Each class corresponds to one contract violation; callers that want to
distinguish failure modes catch the specific class, everything derives
from KneedeepError.
"""


class KneedeepError(Exception):
    """Base class for all kneedeep errors."""


class MissingColumn(KneedeepError):
    def __init__(self, column: str, path: str = ""):
        self.column = column
        self.path = path
        super().__init__(f"missing column {column!r}" + (f" in {path}" if path else ""))


class NonMonotonicTime(KneedeepError):
    def __init__(self, row_index: int):
        self.row_index = row_index
        super().__init__(f"time column not strictly increasing at row {row_index}")


class EmptyFile(KneedeepError):
    pass


class ValueOutOfRange(KneedeepError):
    pass


class InsufficientData(KneedeepError):
    pass


class WindowBeyondData(KneedeepError):
    pass


class UncoveredLabelPoint(KneedeepError):
    pass


class ShapeMismatch(KneedeepError):
    pass


class UnsupportedPrimitive(KneedeepError):
    pass


class NonFiniteLoss(KneedeepError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"loss became non-finite at epoch {epoch}")


class TooFewSamples(KneedeepError):
    pass


class TooFewPoints(KneedeepError):
    pass


class TooFewPairs(KneedeepError):
    pass


class LengthMismatch(KneedeepError):
    pass


class InsufficientStratum(KneedeepError):
    pass


class InvalidSpec(KneedeepError):
    pass


class DegenerateFeatures(KneedeepError):
    pass


class EmptyClassWarning(UserWarning):
    """Emitted when a fitted classifier never predicts one of the classes."""
