"""Exception hierarchy shared by every subpackage.

The CLI maps the three base classes onto distinct exit codes, so each
concrete error derives from exactly one of them.
"""


class UpmuError(Exception):
    """Root of all package errors."""


class ValidationError(UpmuError, ValueError):
    """Bad input: violated preconditions, malformed scenario files."""


class NotFound(UpmuError, LookupError):
    """Unknown stream, version, distiller, meter or branch."""


class ComputationError(UpmuError, RuntimeError):
    """A well-formed request that could not be carried out numerically."""


# phasor-core
class InvalidAngle(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


class DegenerateReference(ValidationError):
    pass


class InvalidReactance(ValidationError):
    pass


# feeder-sim
class InvalidRatio(ValidationError):
    pass


class ModelViolation(ValidationError):
    pass


class NotRadial(ComputationError):
    pass


class Diverged(ComputationError):
    pass


# timeseries-store
class BatchConflict(ValidationError):
    pass


class InvalidPointwidth(ValidationError):
    pass


class WriterBusy(ComputationError):
    pass


class CorruptStore(ComputationError):
    pass


# distiller-pipeline
class OutputClaimed(ValidationError):
    pass


class CyclicDependency(ValidationError):
    pass


# diagnostics
class NoConsistentAssignment(ComputationError):
    pass


class InsufficientVariation(ComputationError):
    pass


class AmbiguousTopology(ComputationError):
    def __init__(self, message, tied=()):
        super().__init__(message)
        self.tied = tuple(tied)


class InsufficientExcitation(ComputationError):
    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = condition


class NumericallySingular(ComputationError):
    pass


class Unobservable(ComputationError):
    pass


class DegenerateTraining(ComputationError):
    pass


class NoFaultDetected(ComputationError):
    pass


class AmbiguousLocation(ComputationError):
    def __init__(self, message, candidates=()):
        super().__init__(message)
        self.candidates = tuple(candidates)


class UnknownUseCase(NotFound):
    pass
