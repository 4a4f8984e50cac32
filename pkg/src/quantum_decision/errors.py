"""Exception hierarchy shared by all modules."""


class QuantumDecisionError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(QuantumDecisionError, ValueError):
    """An input object violates its documented invariants."""


class ValidityBoundViolated(QuantumDecisionError):
    """The first-order Kraus step is outside its positivity region (dt or T too large)."""


class DegenerateDistribution(QuantumDecisionError):
    """Outcome probabilities sum to (numerically) zero."""


class ZeroProbabilityOutcome(QuantumDecisionError):
    """A Kraus outcome with zero probability was requested."""


class ZeroLikelihood(QuantumDecisionError):
    """Bayes update with an observation that has zero likelihood under the prior."""


class InfeasibleWeights(QuantumDecisionError):
    """No Lyapunov weight vector satisfies the curvature sign conditions."""

    def __init__(self, message, violated=None):
        super().__init__(message)
        self.violated = list(violated or [])


class TraceTooShort(QuantumDecisionError):
    """A trace is too short for the residue-class convergence check."""


class InvariantViolation(QuantumDecisionError):
    """A simulated density operator left the set of valid states."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(QuantumDecisionError):
    """A configuration file is missing, unreadable or invalid."""
