"""Exception hierarchy.

Every error carries a ``category`` so the CLI can map it onto an exit code:
``usage`` -> 1, ``data`` -> 2, ``numerical`` -> 3.
"""

from __future__ import annotations


class LangAdaptError(Exception):
    category = "usage"
    exit_code = 1


class UsageError(LangAdaptError):
    pass


class DataError(LangAdaptError, ValueError):
    category = "data"
    exit_code = 2


class NumericalError(LangAdaptError, ArithmeticError):
    category = "numerical"
    exit_code = 3


# -- nn core -----------------------------------------------------------------

class InputShapeError(DataError):
    pass


class TapeMismatchError(UsageError):
    """A gradient tape was replayed against a net it was not recorded on,
    or the net has been updated since the tape was recorded."""


class NonFiniteGradientError(NumericalError):
    pass


class NonFiniteLossError(NumericalError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


# -- svm -----------------------------------------------------------------------

class DegenerateDataError(DataError):
    pass


class CalibrationError(NumericalError):
    def __init__(self, message: str, last_a: float, last_b: float):
        super().__init__(message)
        self.last_a = last_a
        self.last_b = last_b


class UncalibratedModelError(UsageError):
    pass


# -- corpus --------------------------------------------------------------------

class EmptyBatchError(DataError):
    pass


class UnmappedEmotionError(DataError):
    def __init__(self, corpus_id: str, emotion: str):
        super().__init__(f"emotion {emotion!r} has no valence mapping for corpus {corpus_id!r}")
        self.corpus_id = corpus_id
        self.emotion = emotion


class FeatureFileError(DataError):
    """Malformed feature file; ``line`` is 1-based and counts the header."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class DimensionDriftError(FeatureFileError):
    pass


class DuplicateSegmentError(FeatureFileError):
    pass


class ValenceMismatchError(FeatureFileError):
    pass


class SpecError(DataError):
    """Malformed synthetic-corpus spec or experiment config."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


# -- evaluation ------------------------------------------------------------------

class LeakageError(DataError):
    """A protected label (target domain, or test speaker) reached a training path."""


class FoldError(LangAdaptError):
    """Wraps an error raised inside one fold, keeping the original category."""

    def __init__(self, fold: int, cause: LangAdaptError):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause
        self.category = cause.category
        self.exit_code = cause.exit_code
