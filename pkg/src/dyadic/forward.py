"""Truncated Kolmogorov forward equations with bracketing boundary variants.

The infinite forward system ``p_n' = -(lam_n + mu_n) p_n + lam_{n-1} p_{n-1}
+ mu_{n+1} p_{n+1}`` is truncated to states ``1..N`` in two ways:

* ``absorbing``  keeps the full outflow rate at state N, so probability mass
  leaks upward at rate ``lam_N p_N``; the total mass under-estimates the true
  survival probability and increases monotonically with N.
* ``reflecting`` zeroes ``lam_N`` so mass is conserved; the total mass
  over-estimates survival.

Together the two variants bracket the survival function of the minimal
process, which is the only computable error certificate available here.

Time stepping is Crank-Nicolson.  The rates grow like the squared
wavenumbers (1.2e24 at ratio 2 and N = 40) so any explicit scheme is
hopeless, while CN is unconditionally stable and second order.  Because the
generator is time independent the CN update is a fixed linear map; each grid
segment is advanced by binary powers of that map, and the step size is
halved until the survival curve changes by less than the requested
tolerance between refinements.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, stats

from .errors import NegativeMass, NoConvergence, TermLimitExceeded
from .model import SpectralModel, validate_level

#: entries in [-NEG_CLAMP, 0) are treated as roundoff and clamped to zero;
#: anything more negative aborts the solve
NEG_CLAMP = 1e-12

BOUNDARIES = ("absorbing", "reflecting")


@dataclass(frozen=True)
class TruncatedGenerator:
    """Tridiagonal rate data of a truncated q-matrix (transposed convention).

    ``matrix()`` returns G acting on column vectors, ``p'(t) = G p(t)``,
    which is the transpose of the row-vector q-matrix convention.
    """

    n_levels: int
    boundary: str
    lam: np.ndarray  # birth rates lambda_1..lambda_N (lambda_N zeroed when reflecting)
    mu: np.ndarray   # death rates mu_1..mu_N (mu_1 = 0 always)

    def matrix(self) -> np.ndarray:
        n = self.n_levels
        g = np.zeros((n, n))
        diag = -(self.lam + self.mu)
        g[np.arange(n), np.arange(n)] = diag
        g[np.arange(n - 1), np.arange(1, n)] = self.mu[1:]    # inflow from above
        g[np.arange(1, n), np.arange(n - 1)] = self.lam[:-1]  # inflow from below
        return g

    def max_rate(self) -> float:
        return float((self.lam + self.mu).max())


@dataclass
class ForwardSolution:
    """p_n(t) on a grid plus the survival curve sum_n p_n(t)."""

    t_grid: np.ndarray
    p: np.ndarray          # shape (len(t_grid), n_levels)
    survival: np.ndarray   # shape (len(t_grid),)
    boundary: str
    clamp_count: int = 0
    refinements: int = 0
    dt_final: float = float("nan")


@dataclass
class SurvivalBracket:
    lower: ForwardSolution   # absorbing
    upper: ForwardSolution   # reflecting

    @property
    def width(self) -> np.ndarray:
        return self.upper.survival - self.lower.survival


def build_generator(model: SpectralModel, n_levels: int, boundary: str) -> TruncatedGenerator:
    """Assemble the truncated generator from the forward-equation rates."""
    n_levels = validate_level(n_levels)
    if boundary not in BOUNDARIES:
        raise ValueError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
    rates = [model.rates(n) for n in range(1, n_levels + 1)]
    lam = np.array([r.lam for r in rates])
    mu = np.array([r.mu for r in rates])
    if boundary == "reflecting":
        lam[-1] = 0.0
    return TruncatedGenerator(n_levels=n_levels, boundary=boundary, lam=lam, mu=mu)


def build_generator_parabolic(model: SpectralModel, n_levels: int, boundary: str) -> np.ndarray:
    """Generator matrix assembled from the second-difference (parabolic) form.

    Uses the rewriting ``p_n' = lam_n (p_{n+1} - p_n) - lam_{n-1} (p_n -
    p_{n-1})`` which only mentions the birth rates.  Must equal
    ``build_generator(...).matrix()`` entry for entry; kept as an algebraic
    cross-check of the assembly.
    """
    n_levels = validate_level(n_levels)
    if boundary not in BOUNDARIES:
        raise ValueError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
    lam = np.array([model.rates(n).lam for n in range(1, n_levels + 1)])
    if boundary == "reflecting":
        lam[-1] = 0.0
    g = np.zeros((n_levels, n_levels))
    for i in range(n_levels):  # state n = i + 1
        lam_n = lam[i]
        lam_nm1 = lam[i - 1] if i >= 1 else 0.0
        g[i, i] = -(lam_n + lam_nm1)
        if i + 1 < n_levels:
            g[i, i + 1] = lam_n
        if i >= 1:
            g[i, i - 1] = lam_nm1
    return g


def _clamp_negatives(p: np.ndarray) -> int:
    """Zero out roundoff negatives in place; abort on anything real."""
    if not np.all(np.isfinite(p)):
        raise NegativeMass("forward solve left the finite range")
    worst = p.min()
    if worst < -NEG_CLAMP:
        raise NegativeMass(f"forward solve produced probability {worst:.3e}")
    mask = p < 0.0
    count = int(mask.sum())
    if count:
        p[mask] = 0.0
    return count


def _cn_step_matrix(g: np.ndarray, dt: float, conservative: bool) -> np.ndarray:
    """Dense CN update map (I - dt/2 G)^-1 (I + dt/2 G).

    The implicit matrix is tridiagonal and solved in banded form.  For a
    conservative (reflecting) generator the stiff top corner degenerates in
    floating point once ``dt/2 * lam_n`` outgrows the 1 of the identity: the
    exact pivot there is O(1) but is formed as a difference of huge numbers,
    and comes out exactly zero.  Mass conservation gives an equivalent,
    scale-free last equation (column sums of the map are 1), so that row is
    replaced before solving.
    """
    n = g.shape[0]
    eye = np.eye(n)
    a = eye - 0.5 * dt * g
    b = eye + 0.5 * dt * g
    if conservative:
        a[-1, :] = 1.0
        b_mod = b.copy()
        # column sums of I + dt/2 G are exactly 1 (zero column sums of G);
        # summing the huge entries numerically would reintroduce the roundoff
        # the row replacement is there to avoid
        b_mod[-1, :] = 1.0
        m = np.linalg.solve(a, b_mod)
        m /= m.sum(axis=0, keepdims=True)
        return m
    ab = np.zeros((3, n))
    ab[0, 1:] = np.diagonal(a, 1)
    ab[1, :] = np.diagonal(a)
    ab[2, :-1] = np.diagonal(a, -1)
    return linalg.solve_banded((1, 1), ab, b)


def _power_apply(step: np.ndarray, n_steps: int, p: np.ndarray, conservative: bool) -> np.ndarray:
    """step**n_steps @ p by binary exponentiation.

    Conservative maps stay conservative under products in exact arithmetic;
    renormalizing column sums after each product keeps the invariant exact
    instead of letting 1e-16 per squaring compound into level-dependent mass
    drift that would mask truncation-level comparisons.
    """
    if not conservative:
        return np.linalg.matrix_power(step, n_steps) @ p
    result = None
    base = step
    k = n_steps
    while k:
        if k & 1:
            result = base if result is None else base @ result
            result /= result.sum(axis=0, keepdims=True)
        k >>= 1
        if k:
            base = base @ base
            base /= base.sum(axis=0, keepdims=True)
    return p.copy() if result is None else result @ p


def _propagate(g: np.ndarray, p0: np.ndarray, t_grid: np.ndarray, steps: np.ndarray, conservative: bool):
    """One CN pass over the grid at a fixed per-segment step count."""
    out = np.empty((len(t_grid), len(p0)))
    clamps = 0
    p = p0.astype(float).copy()
    idx = 0
    if t_grid[0] == 0.0:
        out[0] = p
        idx = 1
    prev_t = 0.0
    for j in range(idx, len(t_grid)):
        span = t_grid[j] - prev_t
        if span > 0.0:
            n_steps = int(steps[j])
            dt = span / n_steps
            step = _cn_step_matrix(g, dt, conservative)
            p = _power_apply(step, n_steps, p, conservative)
            clamps += _clamp_negatives(p)
        out[j] = p
        prev_t = t_grid[j]
    return out, clamps


def integrate(
    gen: TruncatedGenerator,
    p0: np.ndarray,
    t_grid: np.ndarray,
    tol: float = 1e-8,
    max_refinements: int = 30,
    schedule: Optional[np.ndarray] = None,
) -> ForwardSolution:
    """Crank-Nicolson solve with step halving until the survival curve settles.

    ``p0`` must be nonnegative with total mass at most 1 (it is the
    normalized initial energy profile ``x_n**2 / ||x||**2`` in the
    cross-representation checks).  Negative entries within roundoff of zero
    are clamped and counted, never renormalized: a total below 1 is the
    escaped mass and is exactly the quantity of interest.

    ``schedule`` pins the per-segment step counts and skips refinement.
    Solves whose survival curves are to be compared at resolutions finer
    than the adaptive tolerance (truncation-level sweeps) must share one
    schedule so that the discretization error cancels in the difference.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if len(p0) != gen.n_levels:
        raise ValueError(f"p0 has length {len(p0)}, generator has {gen.n_levels} levels")
    if np.any(p0 < 0.0) or p0.sum() > 1.0 + 1e-12:
        raise ValueError("p0 must be nonnegative with total mass <= 1")
    if np.any(np.diff(t_grid) <= 0.0) or t_grid[0] < 0.0:
        raise ValueError("t_grid must be strictly increasing and nonnegative")

    g = gen.matrix()
    conservative = gen.boundary == "reflecting"
    spans = np.diff(np.concatenate(([0.0], t_grid)))
    if schedule is not None:
        steps = np.asarray(schedule, dtype=np.int64)
        if steps.shape != t_grid.shape or np.any(steps < 1):
            raise ValueError("schedule must hold one positive step count per grid time")
        p, clamps = _propagate(g, p0, t_grid, steps, conservative)
        longest = spans[spans > 0.0]
        return ForwardSolution(
            t_grid=t_grid,
            p=p,
            survival=p.sum(axis=1),
            boundary=gen.boundary,
            clamp_count=clamps,
            refinements=0,
            dt_final=float((longest / steps[spans > 0.0]).max()) if longest.size else 0.0,
        )
    steps = np.maximum(1, np.ones(len(t_grid), dtype=np.int64))
    prev_survival = None
    for level in range(max_refinements + 1):
        try:
            p, clamps = _propagate(g, p0, t_grid, steps, conservative)
        except NegativeMass:
            if level == max_refinements:
                raise
            steps *= 2
            continue
        survival = p.sum(axis=1)
        if prev_survival is not None and np.max(np.abs(survival - prev_survival)) < tol:
            longest = spans[spans > 0.0]
            dt_final = float((longest / steps[spans > 0.0]).max()) if longest.size else 0.0
            return ForwardSolution(
                t_grid=t_grid,
                p=p,
                survival=survival,
                boundary=gen.boundary,
                clamp_count=clamps,
                refinements=level,
                dt_final=dt_final,
            )
        prev_survival = survival
        steps *= 2
    raise NoConvergence(
        f"survival curve did not settle to {tol} within {max_refinements} refinements"
    )


def survival_bracket(
    model: SpectralModel,
    n_levels: int,
    p0: np.ndarray,
    t_grid: np.ndarray,
    tol: float = 1e-8,
) -> SurvivalBracket:
    """Absorbing (lower) and reflecting (upper) solves of the same problem."""
    lower = integrate(build_generator(model, n_levels, "absorbing"), p0, t_grid, tol=tol)
    upper = integrate(build_generator(model, n_levels, "reflecting"), p0, t_grid, tol=tol)
    return SurvivalBracket(lower=lower, upper=upper)


def q_mean_energy(model: SpectralModel, solution: ForwardSolution, e0: float) -> np.ndarray:
    """Mean energy under the transformed measure: e0 times the survival curve.

    The matching closed-form upper bound ``e0 * exp(-t/nu_inf + h)`` is
    available from :meth:`SpectralModel.survival_upper_bound` and is written
    alongside this curve by the CLI.
    """
    if e0 < 0.0:
        raise ValueError(f"initial energy must be >= 0, got {e0}")
    return e0 * solution.survival


def uniformization_reference(
    gen: TruncatedGenerator,
    p0: np.ndarray,
    t: float,
    tail_tol: float = 1e-12,
    max_terms: int = 2_000_000,
) -> np.ndarray:
    """Transient probabilities by the uniformization series; test oracle only.

    Independent of the Crank-Nicolson path: the generator is rescaled into a
    substochastic jump kernel and the Poisson-weighted series is summed over
    the window that carries all but ``tail_tol`` of the Poisson mass.  The
    window start is reached by binary powering, so large ``rate * t`` costs
    only the window itself.
    """
    if gen.n_levels > 20:
        raise TermLimitExceeded(
            f"uniformization oracle is limited to 20 levels, got {gen.n_levels}"
        )
    p0 = np.asarray(p0, dtype=float)
    if t < 0.0:
        raise ValueError(f"time must be >= 0, got {t}")
    if t == 0.0:
        return p0.copy()
    g = gen.matrix()
    rate = gen.max_rate() * (1.0 + 1e-9)
    kernel = np.eye(gen.n_levels) + g / rate
    mu = rate * t
    j_lo = int(max(0, stats.poisson.ppf(tail_tol / 2.0, mu) - 2))
    j_hi = int(stats.poisson.isf(tail_tol / 2.0, mu) + 2)
    if j_hi - j_lo + 1 > max_terms:
        raise TermLimitExceeded(
            f"uniformization window needs {j_hi - j_lo + 1} terms (cap {max_terms})"
        )
    # Poisson weights by recurrence from the mode, then normalized over the
    # window.  Direct exp(logpmf) carries a ~1e-8 coherent error at large mu
    # (gammaln roundoff scaled by mu log mu), far above the tail tolerance.
    js = np.arange(j_lo, j_hi + 1)
    mode = min(max(int(mu), j_lo), j_hi)
    logs = np.zeros(len(js))
    pos = mode - j_lo
    with np.errstate(divide="ignore"):
        ratios_up = np.log(mu / js[pos + 1 :])
        ratios_dn = np.log(js[1 : pos + 1] / mu)
    logs[pos + 1 :] = np.cumsum(ratios_up)
    logs[:pos] = np.cumsum(ratios_dn[::-1])[::-1]
    weights = np.exp(logs - logs.max())
    weights /= weights.sum()
    v = np.linalg.matrix_power(kernel, j_lo) @ p0
    acc = np.zeros_like(p0)
    for w in weights:
        acc += w * v
        v = kernel @ v
    return acc
