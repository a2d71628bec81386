"""Exception hierarchy shared by all modules."""


class IsoembedError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IsoembedError):
    """Invalid grid or parameter configuration."""


class DomainError(IsoembedError, ValueError):
    """Argument outside its admissible range."""


class ResolutionError(ConfigurationError):
    """Grid too coarse for the requested frequency."""


class DomainExhaustedError(ConfigurationError):
    """Shrinking the domain would leave no usable ball."""


class DegenerateImmersionError(IsoembedError):
    """Differential of the map lost rank."""


class FrameSeedError(IsoembedError):
    """Seed vectors do not span the normal space."""


class ConeBoundaryError(IsoembedError):
    """Decomposition coefficient fell below the admissible floor."""


class GuardViolation(IsoembedError):
    """A smallness guard required by the solver was violated."""


class SolverFailure(IsoembedError):
    """Newton iteration did not converge."""


class IllConditionedError(SolverFailure):
    """Jacobian condition number above the configured limit."""


class DivergenceError(IsoembedError):
    """Fixed-point iteration increased the residual."""


class HypothesisViolation(IsoembedError):
    """Stage hypotheses do not hold for the incoming data."""


class LedgerMismatch(IsoembedError):
    """Pullback metric and error ledger disagree."""


class ScheduleInfeasible(IsoembedError):
    """Parameter schedule violates a required bound."""


class InsufficientDataError(IsoembedError):
    """Too few samples for a requested fit."""


class StageAbort(IsoembedError):
    """A stage failed; ``report`` holds whatever was measured before the failure."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
