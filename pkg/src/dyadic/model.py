"""Wavenumber sequences, jump rates, and the closed-form decay constants.

The shell index convention used everywhere in this package:

* modes are numbered ``n = 1, 2, ...`` and ``k_0 = 0`` always, even for a
  geometric sequence where the ratio to the power zero would be 1.  The
  zeroth mode is pinned to zero by the boundary condition of the dynamics,
  and the birth-death picture needs a vanishing death rate at state 1
  (``mu_1 = k_0^2 = 0``) so that no probability mass leaks out at the bottom.
  Forgetting this and using ``k_0 = 1`` silently changes every constant below.

For a geometric sequence ``k_n = ratio**n`` all series are evaluated in
closed form (with ``r = ratio**-2``):

* ``nu_n    = r**n / (1 - r)``            mean occupation time of state n
* ``nu_inf  = r / (1 - r)**2``            mean escape time, equals sum(n * k_n**-2)
* ``h       = -log(1-r) - r*log(r)/(1-r)``  entropy offset in the survival bound
* ``sigma_i = 1 - r``                     escape probability, independent of i
* mean visits ``= 1/(1-r)`` at state 1 and ``(1+r)/(1-r)`` for states >= 2

Partial summation of the same series exists only inside the test suite as an
independent oracle.  Custom sequences fall back to partial sums guarded by an
explicit, configurable stabilization heuristic because no finite procedure
can decide convergence of an arbitrary tail.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import DivergentSeries, InconclusiveSeries, InvalidModel, OverflowRisk

#: Largest truncation level accepted anywhere: k_N**2 must stay comfortably
#: inside double precision (ratio 2 overflows squares near n = 512).
MAX_LEVEL = 256


class Regularity(enum.Enum):
    REGULAR = "regular"
    NOT_REGULAR = "not_regular"


@dataclass(frozen=True)
class TailHeuristic:
    """Knobs for deciding convergence of custom-sequence series.

    A series is called convergent when its partial sums change by less than
    ``rel_tol`` (relatively) over the trailing ``tail_fraction`` of terms,
    divergent when the partial sum exceeds ``divergence_bound``, and
    undecided otherwise.
    """

    rel_tol: float = 1e-12
    divergence_bound: float = 1e6
    tail_fraction: float = 0.1


@dataclass(frozen=True)
class RateTable:
    """Birth/death rates of one state: lambda_n = k_n**2, mu_n = k_{n-1}**2."""

    lam: float
    mu: float
    pi: float


@dataclass(frozen=True)
class DecayConstants:
    """Bundle of nu_1..nu_count, nu_inf, the entropy offset and regularity."""

    nu: np.ndarray
    nu_inf: float
    h: float
    regular: bool


@dataclass(frozen=True)
class SpectralModel:
    """Immutable wavenumber sequence, safe to share across threads.

    Use :meth:`geometric` or :meth:`custom` instead of the raw constructor.
    """

    kind: str
    ratio: Optional[float] = None
    k: Optional[tuple] = None
    heuristic: TailHeuristic = field(default=TailHeuristic())

    @classmethod
    def geometric(cls, ratio: float) -> "SpectralModel":
        return cls(kind="geometric", ratio=float(ratio))

    @classmethod
    def custom(cls, k: Sequence[float], heuristic: TailHeuristic = TailHeuristic()) -> "SpectralModel":
        return cls(kind="custom", k=tuple(float(v) for v in k), heuristic=heuristic)

    def __post_init__(self):
        if self.kind == "geometric":
            if self.ratio is None or not math.isfinite(self.ratio) or self.ratio <= 1.0:
                raise InvalidModel(f"geometric ratio must be a finite real > 1, got {self.ratio}")
        elif self.kind == "custom":
            if not self.k:
                raise InvalidModel("custom sequence must be non-empty")
            for i, v in enumerate(self.k):
                if not math.isfinite(v) or v <= 0.0:
                    raise InvalidModel(f"custom k_{i + 1} must be a positive finite real, got {v}")
        else:
            raise InvalidModel(f"unknown model kind {self.kind!r}")

    # -- wavenumbers and rates ------------------------------------------------

    def wavenumber(self, n: int) -> float:
        """k_n, with the boundary convention k_0 = 0."""
        if n < 0:
            raise IndexError(f"mode index must be >= 0, got {n}")
        if n == 0:
            return 0.0
        if self.kind == "geometric":
            try:
                value = self.ratio ** n
                square = value * value
            except OverflowError:
                square = math.inf
            if not math.isfinite(square):
                raise OverflowRisk(f"k_{n}^2 is not representable in double precision")
            return value
        if n > len(self.k):
            raise IndexError(f"custom sequence has {len(self.k)} terms, mode {n} requested")
        return self.k[n - 1]

    def wavenumbers(self, n_max: int) -> np.ndarray:
        """Array [k_0, k_1, ..., k_n_max]."""
        return np.array([self.wavenumber(n) for n in range(n_max + 1)])

    def rates(self, n: int) -> RateTable:
        """Jump rates of state n: up at k_n**2, down at k_{n-1}**2."""
        if n < 1:
            raise IndexError(f"state index must be >= 1, got {n}")
        lam = self.wavenumber(n) ** 2
        mu = self.wavenumber(n - 1) ** 2
        return RateTable(lam=lam, mu=mu, pi=lam / (lam + mu))

    # -- tail series ----------------------------------------------------------

    @cached_property
    def _custom_tail(self):
        """Suffix sums of k_i**-2 for a custom sequence plus the convergence verdict.

        Verdict applies to sum(n * k_n**-2); when it is "convergent" the
        truncated suffix sums are trusted as the full tails (the neglected
        remainder is below the stabilization tolerance by construction).
        """
        inv2 = np.array([1.0 / v**2 for v in self.k])
        weighted = inv2 * np.arange(1, len(inv2) + 1)
        partial = np.cumsum(weighted)
        total = partial[-1]
        heur = self.heuristic
        if total > heur.divergence_bound:
            verdict = "divergent"
        else:
            tail_start = max(0, int(len(partial) * (1.0 - heur.tail_fraction)) - 1)
            change = total - partial[tail_start]
            verdict = "convergent" if change <= heur.rel_tol * max(total, 1e-300) else "undecided"
        suffix = np.concatenate((np.cumsum(inv2[::-1])[::-1], [0.0]))
        return suffix, verdict, total, weighted[-1]

    def _require_convergent(self):
        suffix, verdict, total, last_term = self._custom_tail
        if verdict == "divergent":
            raise DivergentSeries(
                f"sum(n * k_n**-2) exceeded the divergence bound ({total:.6g})"
            )
        if verdict == "undecided":
            raise InconclusiveSeries(
                "partial sums of n * k_n**-2 did not stabilize within the configured tolerance",
                partial_sum=total,
                tail_estimate=last_term * len(self.k),
            )
        return suffix

    def nu(self, n: int) -> float:
        """Mean occupation time of state n: sum of k_i**-2 over i >= n."""
        if n < 1:
            raise IndexError(f"state index must be >= 1, got {n}")
        if self.kind == "geometric":
            r = self.ratio ** -2
            return r**n / (1.0 - r)
        if n > len(self.k):
            raise IndexError(f"custom sequence has {len(self.k)} terms, nu({n}) requested")
        suffix = self._require_convergent()
        return float(suffix[n - 1])

    def nu_infinity(self) -> float:
        """Mean escape time: sum of n * k_n**-2, also the sum of all nu_n."""
        if self.kind == "geometric":
            r = self.ratio ** -2
            return r / (1.0 - r) ** 2
        suffix = self._require_convergent()
        return float(suffix.sum())

    def nu_tail_sum(self, m: int) -> float:
        """Sum of nu_n over n >= m; bounds the escape time omitted beyond a cap."""
        if m < 1:
            raise IndexError(f"state index must be >= 1, got {m}")
        if self.kind == "geometric":
            r = self.ratio ** -2
            return r**m / (1.0 - r) ** 2
        if m > len(self.k):
            return 0.0
        suffix = self._require_convergent()
        return float(suffix[m - 1 :].sum())

    def entropy_offset(self) -> float:
        """Offset h >= 0 in the survival upper bound exp(-t/nu_inf + h).

        Equals the Shannon entropy of the distribution w_n = nu_n / nu_inf;
        for a geometric sequence the w_n are geometric with parameter
        1 - ratio**-2 and h has the closed form in the module docstring.
        """
        if self.kind == "geometric":
            r = self.ratio ** -2
            return -math.log(1.0 - r) - r * math.log(r) / (1.0 - r)
        suffix = self._require_convergent()
        nu_inf = suffix.sum()
        w = suffix[:-1] / nu_inf
        mass = w.sum()
        if abs(mass - 1.0) > 1e-10:
            raise DivergentSeries(
                f"nu_n / nu_inf mass sums to {mass!r}; tail too heavy for the entropy offset"
            )
        w = w[w > 0.0]
        return float(-(w * np.log(w)).sum())

    # -- chain statistics -----------------------------------------------------

    def escape_probability(self, i: int) -> float:
        """Probability that the chain at state i+1 never returns to state i."""
        if i < 1:
            raise IndexError(f"state index must be >= 1, got {i}")
        if self.kind == "geometric":
            # k_i**2 * nu_i is constant in i, so sigma = 1 - ratio**-2
            return 1.0 - self.ratio ** -2
        return 1.0 / (self.wavenumber(i) ** 2 * self.nu(i))

    def mean_visits(self, n: int) -> float:
        """Mean of the geometric number of visits to state n (chain started at 1)."""
        if n < 1:
            raise IndexError(f"state index must be >= 1, got {n}")
        rt = self.rates(n)
        return (rt.lam + rt.mu) * self.nu(n)

    def p_rate_bound(self, e0: float) -> Optional[float]:
        """Decay-rate bound for the mean energy under the original measure.

        Returns ``-(1/nu_inf) * (1 - sqrt(e0 * nu_inf))**2`` when the
        smallness condition ``nu_inf * e0 < 1`` holds, ``None`` otherwise
        (outside that range the change of measure is not known to extend to
        the infinite horizon and no bound is claimed).
        """
        if e0 < 0.0:
            raise ValueError(f"initial energy must be >= 0, got {e0}")
        nu_inf = self.nu_infinity()
        if nu_inf * e0 >= 1.0:
            return None
        return -(1.0 / nu_inf) * (1.0 - math.sqrt(e0 * nu_inf)) ** 2

    def regularity(self) -> Regularity:
        """Whether the associated q-matrix is regular (escape impossible).

        Not regular exactly when sum(n * k_n**-2) converges.  Custom
        sequences are decided by the stabilization heuristic and raise
        :class:`InconclusiveSeries` when neither branch triggers.
        """
        if self.kind == "geometric":
            return Regularity.NOT_REGULAR
        _, verdict, total, last_term = self._custom_tail
        if verdict == "convergent":
            return Regularity.NOT_REGULAR
        if verdict == "divergent":
            return Regularity.REGULAR
        raise InconclusiveSeries(
            "cannot decide regularity for this custom sequence",
            partial_sum=total,
            tail_estimate=last_term * len(self.k),
        )

    def decay_constants(self, count: int) -> DecayConstants:
        """nu_1..nu_count together with nu_inf, h and the regularity verdict."""
        nu = np.array([self.nu(n) for n in range(1, count + 1)])
        try:
            regular = self.regularity() is Regularity.REGULAR
        except InconclusiveSeries:
            regular = False
        return DecayConstants(nu=nu, nu_inf=self.nu_infinity(), h=self.entropy_offset(), regular=regular)

    # -- survival bounds ------------------------------------------------------

    def survival_lower_bound(self, t: float) -> float:
        """exp(-t / nu_1), a lower bound for the escape-time survival function."""
        return math.exp(-t / self.nu(1))

    def survival_upper_bound(self, t: float) -> float:
        """exp(-t / nu_inf + h), an upper bound (may exceed 1 for small t)."""
        return math.exp(-t / self.nu_infinity() + self.entropy_offset())


def validate_level(n_levels: int) -> int:
    """Common guard for truncation levels used by the simulation modules."""
    if not 2 <= n_levels <= MAX_LEVEL:
        raise OverflowRisk(f"truncation level must be in [2, {MAX_LEVEL}], got {n_levels}")
    return int(n_levels)
