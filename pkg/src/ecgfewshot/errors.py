"""Exception hierarchy for the pipeline.

Exceptions are grouped by the CLI exit code they map to: usage errors (1),
data errors (2), numeric failures (3).
"""


class PipelineError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 2


class UsageError(PipelineError):
    """Bad invocation: missing/contradictory flags or config keys."""

    exit_code = 1


class DataError(PipelineError):
    """Invalid or infeasible input data."""

    exit_code = 2


class NumericError(PipelineError):
    """Numerical failure (overflow, divergence, singular system)."""

    exit_code = 3


# --- signal ---

class EmptySignal(DataError):
    pass


class NoBeatsDetected(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


# --- nomogram ---

class InvalidBoundary(DataError):
    pass


class MissingGroundTruth(DataError):
    def __init__(self, record_ids):
        self.record_ids = list(record_ids)
        super().__init__(
            "records missing QT/HR ground truth: " + ", ".join(self.record_ids)
        )


# --- render ---

class RasterOverflow(NumericError):
    pass


# --- synth ---

class InfeasibleShape(DataError):
    pass


class SpecInfeasible(DataError):
    pass


# --- dataset ---

class SchemaError(DataError):
    pass


class InfeasibleStratification(DataError):
    pass


# --- fewshot ---

class InsufficientClassMembers(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyClass(DataError):
    pass


class NumericalOverflow(NumericError):
    pass


class TrainingDiverged(NumericError):
    pass


# --- explain ---

class SingularSystem(NumericError):
    pass
