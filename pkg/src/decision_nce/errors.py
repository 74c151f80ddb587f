"""Structured errors raised across the package.

Every error carries the values that triggered it as attributes so callers (and
the CLI) can report them without parsing messages.
"""

from typing import Any


class DecisionNCEError(Exception):
    """Base class for all errors raised by decision_nce."""


class ShapeMismatchError(DecisionNCEError):
    def __init__(self, operation: str, *shapes: tuple[int, ...]):
        self.operation = operation
        self.shapes = shapes
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{operation}: incompatible shapes {rendered}")


class EmptyInputError(DecisionNCEError):
    def __init__(self, operation: str):
        self.operation = operation
        super().__init__(f"{operation}: input must be non-empty")


class NonScalarRootError(DecisionNCEError):
    def __init__(self, shape: tuple[int, ...]):
        self.shape = shape
        super().__init__(f"backward requires a scalar root, got shape {shape}")


class NonFiniteError(DecisionNCEError):
    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite value encountered in {where}")


class SegmentError(DecisionNCEError):
    def __init__(self, h: int, reason: str):
        self.h = h
        self.reason = reason
        super().__init__(f"trajectory of length {h}: {reason}")


class VocabularyError(DecisionNCEError):
    def __init__(self, token: Any, size: int):
        self.token = token
        self.size = size
        super().__init__(f"token {token!r} is outside the vocabulary of size {size}")


class FrameCountError(DecisionNCEError):
    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"expected {expected} frames, got {got}")


class BatchSizeError(DecisionNCEError):
    def __init__(self, batch_size: int):
        self.batch_size = batch_size
        super().__init__(f"batch losses need at least 2 segments, got {batch_size}")


class ConfigError(DecisionNCEError):
    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"invalid config field {field!r}: {reason}")


class TrainingDivergedError(DecisionNCEError):
    def __init__(self, iteration: int, batch_seed: tuple[int, int]):
        self.iteration = iteration
        self.batch_seed = batch_seed
        super().__init__(
            f"loss became NaN at iteration {iteration} (batch seed {list(batch_seed)})"
        )


class CheckpointFormatError(DecisionNCEError):
    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class DatasetFormatError(DecisionNCEError):
    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class CompatibilityError(DecisionNCEError):
    def __init__(self, field: str, expected: Any, got: Any):
        self.field = field
        self.expected = expected
        self.got = got
        super().__init__(f"{field} mismatch: checkpoint has {expected}, input has {got}")


class MissingActionsError(DecisionNCEError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"demo {index} carries no actions")
