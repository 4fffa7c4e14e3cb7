"""Exception hierarchy shared across the package."""

from __future__ import annotations


class StepConfError(Exception):
    """Base class for all package errors."""


# trajectory model
class AlreadyFinalized(StepConfError):
    pass


class NonMonotonicTimestep(StepConfError):
    pass


class IndexOutOfRange(StepConfError):
    pass


class UnfinalizedTrajectory(StepConfError):
    pass


class SinkFailure(StepConfError):
    pass


class MalformedRecord(StepConfError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DimensionMismatch(StepConfError):
    pass


# environment
class TerminatedEpisode(StepConfError):
    pass


class EpisodeNotTerminated(StepConfError):
    pass


class UnknownLayer(StepConfError):
    pass


class InvalidConfig(StepConfError):
    pass


# rewards
class ReplayMismatch(StepConfError):
    pass


class BudgetZero(StepConfError):
    pass


# conformal
class OutOfRangeReward(StepConfError):
    pass


class EmptyCalibration(StepConfError):
    pass


class EmptyInput(StepConfError):
    pass


class InsufficientCalibration(StepConfError):
    pass


class StoreNotFrozen(StepConfError):
    pass


# probes
class DegenerateDataset(StepConfError):
    pass


class EmptyCell(StepConfError):
    pass


# steering
class InsufficientExamples(StepConfError):
    pass


class ZeroContrast(StepConfError):
    pass


# pipeline
class MissingStage(StepConfError):
    pass


class StageFailure(StepConfError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
