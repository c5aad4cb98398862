"""Exception hierarchy shared by all modules."""


class BPDLError(Exception):
    """Base class for errors raised by this package."""


class DomainError(BPDLError, ValueError):
    """A trait point lies outside the trait space."""


class ConfigError(BPDLError, ValueError):
    """Invalid model, initial condition or experiment configuration."""


class SamplingError(BPDLError, RuntimeError):
    """A rejection sampler exceeded its iteration cap."""


class BudgetError(BPDLError, RuntimeError):
    """An event or count budget was exhausted.

    ``partial`` carries whatever was computed before the budget ran out.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class CacheCoherenceError(BPDLError, RuntimeError):
    """Incrementally maintained rate sums drifted from a fresh recomputation."""


class ReplayError(BPDLError, RuntimeError):
    """An event log does not replay onto its recorded initial population."""


class DivergenceError(BPDLError, RuntimeError):
    """The mean-field integrator left its a-priori mass bound."""


class NumericalInstabilityError(BPDLError, RuntimeError):
    """A covariance iterate lost positive semidefiniteness."""


class AlignmentError(BPDLError, ValueError):
    """Two paths do not share snapshot times or observables."""


class EstimatorError(BPDLError, ValueError):
    """Too few samples for the requested estimator."""


class PreconditionError(BPDLError, ValueError):
    """Inputs violate a documented precondition."""


class InapplicableBoundError(PreconditionError):
    """The closed-form tail bound's largeness conditions do not hold."""
