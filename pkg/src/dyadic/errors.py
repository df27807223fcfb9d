"""Exception hierarchy shared across the toolkit.

Every error that maps to a CLI exit code carries an ``exit_code`` attribute;
anything else exits with the generic failure code 1.
"""


class DyadicError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class InvalidModel(DyadicError):
    """Wavenumber sequence violates its constraints (e.g. ratio <= 1)."""


class DivergentSeries(DyadicError):
    """A tail-dependent constant was requested but the series does not converge."""


class InconclusiveSeries(DyadicError):
    """Convergence of a custom sequence could not be decided.

    Carries the partial sum and a crude tail estimate so callers can report
    what was actually computed.
    """

    def __init__(self, message, partial_sum=None, tail_estimate=None):
        super().__init__(message)
        self.partial_sum = partial_sum
        self.tail_estimate = tail_estimate


class ConfigError(DyadicError):
    """Invalid or inconsistent experiment configuration."""

    exit_code = 2


class SimulationDiverged(DyadicError):
    """A state vector picked up NaN/Inf entries during integration."""

    exit_code = 3


class InsufficientData(DyadicError):
    """Not enough samples to evaluate the requested statistic."""

    exit_code = 4


class DegenerateInput(DyadicError):
    """Estimator input is structurally unusable (e.g. nonpositive energies)."""


class NoConvergence(DyadicError):
    """Adaptive refinement stalled before reaching the requested tolerance."""


class NegativeMass(DyadicError):
    """Forward solve produced negative probabilities beyond the clamp window."""


class OverflowRisk(DyadicError):
    """Requested truncation level would overflow double precision rates."""


class TermLimitExceeded(DyadicError):
    """Uniformization series would need more terms than the configured cap."""


class EffectiveSampleCollapse(DyadicError):
    """Importance-sampling effective sample size fell below the usable floor."""
