"""Exception hierarchy. Each category carries the CLI exit code it maps to."""

from __future__ import annotations


class StrDistillError(Exception):
    exit_code = 1


class ConfigError(StrDistillError, ValueError):
    exit_code = 2

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class DataError(StrDistillError, ValueError):
    exit_code = 3


class NumericError(StrDistillError, ArithmeticError):
    exit_code = 4


class StorageError(StrDistillError, OSError):
    exit_code = 5


# charset / labels
class LabelTooLong(DataError):
    pass


class UnknownChar(DataError):
    pass


class EmptyLabel(DataError):
    pass


# shapes
class ShapeMismatch(DataError):
    pass


class BadImageShape(ShapeMismatch):
    pass


class BadTargetLength(ShapeMismatch):
    pass


class GridMismatch(ShapeMismatch):
    pass


class MissingStage(DataError):
    pass


class TokenizerExpansion(DataError):
    pass


# datasets
class MissingManifest(DataError):
    pass


class UnreadableImage(DataError):
    pass


class DatasetEmpty(DataError):
    pass


class MissingDataset(DataError):
    pass


class NoFonts(DataError):
    pass


class EmptyEval(DataError):
    pass


class LengthMismatch(DataError):
    pass


# numerics
class NonPositiveTau(ConfigError):
    pass


class UnknownCommand(ConfigError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, term: str, value: float, step: int | None = None):
        self.term = term
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term '{term}' = {value}{where}")


# storage
class CacheMiss(StorageError, KeyError):
    pass


class CorruptRecord(StorageError):
    pass


class BadCheckpoint(StorageError):
    pass
