"""Event-driven simulation of the minimal birth-death process.

The chain waits in state ``n`` for an exponential time with rate
``lam_n + mu_n`` and then jumps up with probability ``pi_n`` and down
otherwise.  Simulation stops when the state exceeds ``cap`` (the sample
escaped; with the default cap of 60 at ratio 2 the expected time omitted
above the cap is below 1e-35) or when the elapsed time passes ``time_cap``
(the sample is right-censored; censoring is data, not an error).

Randomness contract: each sample owns the counter-based stream
``Philox(key=(seed, sample_index))`` and consumes exactly two uniforms per
jump, holding time first (by inversion, ``-log1p(-u) / rate``) and jump
direction second.  Results are therefore independent of batching, execution
order and worker count.  The scalar :func:`sample_escape` and the batched
:func:`sample_escape_ensemble` replay the identical consumption pattern;
a test pins their equality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import stats

from .errors import InsufficientData
from .model import SpectralModel, validate_level
from .rng import sample_stream

#: uniforms drawn per sample before falling back to a larger block
DRAW_BLOCK = 256

#: samples per worker task; fixed so results cannot depend on worker count
CHUNK = 8192


@dataclass
class EscapeSample:
    """One trajectory summary: escape time, occupation times, visit counts."""

    tau: float
    censored: bool
    occupation: np.ndarray
    visits: np.ndarray
    cap_reached: bool
    tail_bias_bound: float


@dataclass
class EscapeEnsemble:
    """Column-oriented batch of escape samples plus per-state jump counters."""

    tau: np.ndarray
    censored: np.ndarray
    cap_reached: np.ndarray
    occupation: np.ndarray  # (n_samples, cap)
    visits: np.ndarray      # (n_samples, cap)
    up_jumps: np.ndarray    # (cap,) jumps upward out of each state
    jumps: np.ndarray       # (cap,) total jumps out of each state
    tail_bias_bound: float
    start: int
    cap: int
    time_cap: float
    seed: int

    def __len__(self) -> int:
        return len(self.tau)

    def sample(self, i: int) -> EscapeSample:
        return EscapeSample(
            tau=float(self.tau[i]),
            censored=bool(self.censored[i]),
            occupation=self.occupation[i],
            visits=self.visits[i],
            cap_reached=bool(self.cap_reached[i]),
            tail_bias_bound=self.tail_bias_bound,
        )


@dataclass
class SurvivalEstimate:
    """Empirical escape-time survival with normal-approximation 95% CI."""

    t_grid: np.ndarray
    s_hat: np.ndarray
    ci_half_width: np.ndarray
    lower_bound: np.ndarray  # exp(-t / nu_1)
    upper_bound: np.ndarray  # exp(-t / nu_inf + h)
    n_samples: int


@dataclass
class OccupationStats:
    """Occupation-time statistics of one state against its exponential law."""

    state: int
    mean: float
    variance: float
    ks_stat: float
    n_used: int


def default_time_cap(model: SpectralModel) -> float:
    """Censoring horizon: 50 mean escape times, so censoring is essentially never."""
    return 50.0 * model.nu_infinity()


@njit(cache=True, nogil=True)
def _run_samples(u, start, cap, time_cap, lam, mu, pi,
                 occupation, visits, tau, censored, cap_reached, exhausted,
                 up_jumps, jumps):
    n_samples, block = u.shape
    for i in range(n_samples):
        t = 0.0
        s = start
        j = 0
        visits[i, s - 1] += 1
        while True:
            if j + 2 > block:
                exhausted[i] = True
                break
            rate = lam[s - 1] + mu[s - 1]
            hold = -math.log1p(-u[i, j]) / rate
            j += 1
            if t + hold >= time_cap:
                occupation[i, s - 1] += time_cap - t
                t = time_cap
                censored[i] = True
                break
            t += hold
            occupation[i, s - 1] += hold
            up = u[i, j] < pi[s - 1]
            j += 1
            up_jumps[s - 1] += 1 if up else 0
            jumps[s - 1] += 1
            s = s + 1 if up else s - 1
            if s > cap:
                cap_reached[i] = True
                break
            visits[i, s - 1] += 1
        tau[i] = t


def _rate_arrays(model: SpectralModel, cap: int):
    rates = [model.rates(n) for n in range(1, cap + 1)]
    lam = np.array([r.lam for r in rates])
    mu = np.array([r.mu for r in rates])
    pi = np.array([r.pi for r in rates])
    return lam, mu, pi


def sample_escape(
    model: SpectralModel,
    rng_stream: np.random.Generator,
    start: int = 1,
    cap: int = 60,
    time_cap: Optional[float] = None,
) -> EscapeSample:
    """Simulate one escape trajectory, drawing from the supplied stream."""
    cap = validate_level(cap)
    if start < 1:
        raise ValueError(f"start state must be >= 1, got {start}")
    if time_cap is None:
        time_cap = default_time_cap(model)
    lam, mu, pi = _rate_arrays(model, cap)
    occupation = np.zeros(cap)
    visits = np.zeros(cap, dtype=np.int32)
    t = 0.0
    s = start
    censored = False
    cap_reached = False
    visits[s - 1] += 1
    while True:
        rate = lam[s - 1] + mu[s - 1]
        hold = -math.log1p(-rng_stream.random()) / rate
        if t + hold >= time_cap:
            occupation[s - 1] += time_cap - t
            t = time_cap
            censored = True
            break
        t += hold
        occupation[s - 1] += hold
        up = rng_stream.random() < pi[s - 1]
        s = s + 1 if up else s - 1
        if s > cap:
            cap_reached = True
            break
        visits[s - 1] += 1
    return EscapeSample(
        tau=t,
        censored=censored,
        occupation=occupation,
        visits=visits,
        cap_reached=cap_reached,
        tail_bias_bound=model.nu_tail_sum(cap + 1),
    )


def _run_chunk(model, seed, index_lo, index_hi, start, cap, time_cap, lam, mu, pi):
    n = index_hi - index_lo
    occupation = np.zeros((n, cap))
    visits = np.zeros((n, cap), dtype=np.int32)
    tau = np.zeros(n)
    censored = np.zeros(n, dtype=np.bool_)
    cap_reached = np.zeros(n, dtype=np.bool_)
    up_jumps = np.zeros(cap, dtype=np.int64)
    jumps = np.zeros(cap, dtype=np.int64)
    block = DRAW_BLOCK
    pending = np.arange(index_lo, index_hi)
    while len(pending):
        u = np.empty((len(pending), block))
        for row, idx in enumerate(pending):
            u[row] = sample_stream(seed, idx).random(block)
        occ = np.zeros((len(pending), cap))
        vis = np.zeros((len(pending), cap), dtype=np.int32)
        ta = np.zeros(len(pending))
        ce = np.zeros(len(pending), dtype=np.bool_)
        cr = np.zeros(len(pending), dtype=np.bool_)
        ex = np.zeros(len(pending), dtype=np.bool_)
        upj = np.zeros(cap, dtype=np.int64)
        jmp = np.zeros(cap, dtype=np.int64)
        _run_samples(u, start, cap, time_cap, lam, mu, pi, occ, vis, ta, ce, cr, ex, upj, jmp)
        done = ~ex
        rows = pending - index_lo
        occupation[rows[done]] = occ[done]
        visits[rows[done]] = vis[done]
        tau[rows[done]] = ta[done]
        censored[rows[done]] = ce[done]
        cap_reached[rows[done]] = cr[done]
        if done.all():
            up_jumps += upj
            jumps += jmp
        else:
            # jump counters from exhausted partial replays must be discarded;
            # rerun cleanly and fold in only completed samples
            comp_upj = np.zeros(cap, dtype=np.int64)
            comp_jmp = np.zeros(cap, dtype=np.int64)
            _run_samples(u[done], start, cap, time_cap, lam, mu, pi,
                         np.zeros((int(done.sum()), cap)),
                         np.zeros((int(done.sum()), cap), dtype=np.int32),
                         np.zeros(int(done.sum())),
                         np.zeros(int(done.sum()), dtype=np.bool_),
                         np.zeros(int(done.sum()), dtype=np.bool_),
                         np.zeros(int(done.sum()), dtype=np.bool_),
                         comp_upj, comp_jmp)
            up_jumps += comp_upj
            jumps += comp_jmp
        pending = pending[ex]
        block *= 2
    return occupation, visits, tau, censored, cap_reached, up_jumps, jumps


def sample_escape_ensemble(
    model: SpectralModel,
    n_samples: int,
    seed: int,
    start: int = 1,
    cap: int = 60,
    time_cap: Optional[float] = None,
    workers: int = 1,
) -> EscapeEnsemble:
    """Simulate ``n_samples`` independent escape trajectories.

    Matches ``sample_escape(model, sample_stream(seed, i), ...)`` sample by
    sample; chunks are only a batching detail and ``workers`` only sets how
    many chunks run concurrently.
    """
    cap = validate_level(cap)
    if start < 1:
        raise ValueError(f"start state must be >= 1, got {start}")
    if time_cap is None:
        time_cap = default_time_cap(model)
    lam, mu, pi = _rate_arrays(model, cap)
    bounds = [(lo, min(lo + CHUNK, n_samples)) for lo in range(0, n_samples, CHUNK)]

    def task(b):
        return _run_chunk(model, seed, b[0], b[1], start, cap, time_cap, lam, mu, pi)

    if workers > 1 and len(bounds) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(task, bounds))
    else:
        parts = [task(b) for b in bounds]

    return EscapeEnsemble(
        tau=np.concatenate([p[2] for p in parts]),
        censored=np.concatenate([p[3] for p in parts]),
        cap_reached=np.concatenate([p[4] for p in parts]),
        occupation=np.concatenate([p[0] for p in parts]),
        visits=np.concatenate([p[1] for p in parts]),
        up_jumps=sum(p[5] for p in parts),
        jumps=sum(p[6] for p in parts),
        tail_bias_bound=model.nu_tail_sum(cap + 1),
        start=start,
        cap=cap,
        time_cap=time_cap,
        seed=seed,
    )


def occupation_statistics(
    model: SpectralModel,
    ensemble: EscapeEnsemble,
    n: int,
    min_samples: int = 100,
) -> OccupationStats:
    """Mean/variance/KS statistic of the occupation time of state ``n``.

    The KS statistic is computed against the exponential law with the
    closed-form mean ``nu_n``.  Censored samples are excluded: the
    exponential law concerns completed trajectories from state 1, and the
    chain visits every state below its escape level, so zero occupations
    cannot occur in the uncensored population.
    """
    if not 1 <= n <= ensemble.cap:
        raise ValueError(f"state must be within the simulated cap, got {n}")
    keep = ~ensemble.censored
    values = ensemble.occupation[keep, n - 1]
    if len(values) < min_samples:
        raise InsufficientData(
            f"{len(values)} uncensored samples for state {n}, need {min_samples}"
        )
    mean = float(values.mean())
    variance = float(values.var(ddof=1))
    ks = float(stats.kstest(values, "expon", args=(0.0, model.nu(n))).statistic)
    return OccupationStats(state=n, mean=mean, variance=variance, ks_stat=ks, n_used=len(values))


def survival_curve(
    model: SpectralModel,
    ensemble: EscapeEnsemble,
    t_grid: Sequence[float],
) -> SurvivalEstimate:
    """Empirical survival of the escape time on a grid, with the closed-form bounds.

    Censored samples survive every grid time below the censoring horizon
    (the grid must stay inside it).  With zero surviving samples the CI
    half-width collapses to zero, which is the degenerate one-sided case.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0.0) or np.any(t_grid >= ensemble.time_cap):
        raise ValueError("t_grid must lie within [0, time_cap)")
    n = len(ensemble)
    s_hat = np.array([(ensemble.tau > t).mean() for t in t_grid])
    ci = 1.96 * np.sqrt(s_hat * (1.0 - s_hat) / n)
    lower = np.array([model.survival_lower_bound(t) for t in t_grid])
    upper = np.array([model.survival_upper_bound(t) for t in t_grid])
    return SurvivalEstimate(
        t_grid=t_grid,
        s_hat=s_hat,
        ci_half_width=ci,
        lower_bound=lower,
        upper_bound=upper,
        n_samples=n,
    )
