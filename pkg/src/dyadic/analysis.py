"""Estimators and reports connecting the three representations.

Everything here aggregates immutable :class:`~dyadic.sde.PathRecord` batches;
nothing mutates shared state, so reports can be built concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import DegenerateInput, EffectiveSampleCollapse
from .model import SpectralModel
from .sde import PathRecord, estimate_decay_rate

#: importance-sampling curves are cut where ESS drops below this
ESS_FLOOR = 50.0


def effective_sample_size(weights: np.ndarray) -> float:
    """(sum w)^2 / sum w^2; equals the path count for constant weights."""
    s = weights.sum()
    q = (weights**2).sum()
    return float(s * s / q) if q > 0.0 else 0.0


@dataclass
class RateReport:
    """Tail decay-rate estimate with the closed-form reference lines."""

    median_slope: float
    max_slope: float
    reference_lines: Dict[str, float]
    n_paths: int
    n_levels: int
    horizon: float
    window: float
    short_horizon: bool      # horizon below 5 mean escape times; transient may leak in
    n_floor_hits: int        # paths whose tail energy hit numerical zero


@dataclass
class WeightedEnergyCurve:
    """Mean energy under both measures from one nonlinear batch."""

    t: np.ndarray
    p_mean: np.ndarray          # plain average of the energy
    p_mean_ci: np.ndarray
    p_mean_bound: np.ndarray    # Hoelder bound at the optimal exponent
    q_mean: np.ndarray          # density-weighted average, estimates the Q mean
    q_mean_ci: np.ndarray
    ess: np.ndarray
    usable: np.ndarray          # ess >= floor; weighted values beyond are noise
    n_paths: int


@dataclass
class NovikovReport:
    """Smallness-condition margin and the finite-horizon exponential moment."""

    margin: float
    satisfied: bool
    horizon: Optional[float] = None
    mc_estimate: Optional[float] = None
    mc_ci: Optional[float] = None
    integral_median: Optional[float] = None
    integral_p95: Optional[float] = None
    n_paths: Optional[int] = None


@dataclass
class BlowupRow:
    n_levels: int
    median: float
    p90: float
    n_paths: int
    horizon: float


def q_decay_report(model: SpectralModel, record: PathRecord, window: float = 0.5) -> RateReport:
    """Per-path tail slopes of log energy for a linearized-dynamics batch.

    The horizon should cover several mean escape times so the window sits in
    the asymptotic regime; shorter runs are reported with ``short_horizon``
    set rather than rejected, since the tolerance on the reference line is
    configuration dependent anyway.
    """
    if record.config.measure != "q_linear":
        raise ValueError("decay report expects a q_linear batch")
    e0 = float(record.energy[:, 0].max())
    if e0 == 0.0:
        raise DegenerateInput("all-zero initial condition; decay rate undefined")
    slopes = np.array(
        [estimate_decay_rate(record.t, record.energy[i], window=window)
         for i in range(record.n_paths)]
    )
    finite = slopes[np.isfinite(slopes)]
    if len(finite) == 0:
        raise DegenerateInput("every path hit numerical zero inside the window")
    nu_inf = model.nu_infinity()
    refs = {"-1/nu_1": -1.0 / model.nu(1), "-1/nu_inf": -1.0 / nu_inf}
    bound = model.p_rate_bound(e0)
    if bound is not None:
        refs["p_rate_bound"] = bound
    return RateReport(
        median_slope=float(np.median(finite)),
        max_slope=float(finite.max()),
        reference_lines=refs,
        n_paths=record.n_paths,
        n_levels=record.n_levels,
        horizon=record.config.horizon,
        window=window,
        short_horizon=record.config.horizon < 5.0 * nu_inf,
        n_floor_hits=int((~np.isfinite(slopes)).sum()),
    )


def holder_energy_bound(model: SpectralModel, e0: float, t: np.ndarray) -> np.ndarray:
    """Upper bound for the mean energy under the original measure.

    ``e0 * exp((1 - 1/p) (h + (p e0 - 1/nu_inf) t))`` minimized at
    ``p = sqrt((1/nu_inf - h/t) / e0)`` where that exceeds 1; at earlier
    times the infimum over admissible exponents degenerates to the trivial
    bound ``e0`` (the exponent's limit from above at 1).
    """
    t = np.asarray(t, dtype=float)
    alpha = 1.0 / model.nu_infinity()
    h = model.entropy_offset()
    out = np.full(t.shape, float(e0))
    if e0 == 0.0:
        return out
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.sqrt(np.maximum((alpha - h / t) / e0, 0.0))
    ok = (t > 0.0) & (phi > 1.0)
    out[ok] = e0 * np.exp((1.0 - 1.0 / phi[ok]) * (h + (phi[ok] * e0 - alpha) * t[ok]))
    return out


def p_weighted_energy(model: SpectralModel, record: PathRecord) -> WeightedEnergyCurve:
    """Plain and density-weighted mean energy from a nonlinear batch.

    The weighted curve estimates the mean energy under the transformed
    measure and should match ``e0`` times the absorbing forward survival;
    points where the effective sample size falls under :data:`ESS_FLOOR`
    are flagged unusable instead of silently reporting noise.
    """
    if record.config.measure != "p_nonlinear" or record.girsanov_m is None:
        raise ValueError("weighted energy needs a p_nonlinear batch with the tracker recorded")
    n, n_grid = record.energy.shape
    e0 = float(record.energy[:, 0].mean())
    p_mean = record.energy.mean(axis=0)
    p_ci = 1.96 * record.energy.std(axis=0, ddof=1) / math.sqrt(n)
    q_mean = np.empty(n_grid)
    q_ci = np.empty(n_grid)
    ess = np.empty(n_grid)
    for j in range(n_grid):
        w = np.exp(record.log_weight("QoverP", j))
        prod = w * record.energy[:, j]
        q_mean[j] = prod.mean()
        q_ci[j] = 1.96 * prod.std(ddof=1) / math.sqrt(n)
        ess[j] = effective_sample_size(w)
    usable = ess >= ESS_FLOOR
    if not usable[0]:
        raise EffectiveSampleCollapse(
            f"effective sample size {ess[0]:.1f} below {ESS_FLOOR} at the initial time"
        )
    return WeightedEnergyCurve(
        t=record.t,
        p_mean=p_mean,
        p_mean_ci=p_ci,
        p_mean_bound=holder_energy_bound(model, e0, record.t),
        q_mean=q_mean,
        q_mean_ci=q_ci,
        ess=ess,
        usable=usable,
        n_paths=n,
    )


def novikov_diagnostic(
    model: SpectralModel,
    e0: float,
    record: Optional[PathRecord] = None,
) -> NovikovReport:
    """Smallness condition ``nu_inf * e0 < 1`` plus a finite-horizon proxy.

    The infinite-horizon exponential moment is not measurable on a desk; the
    report carries the Monte Carlo estimate of ``E[exp(int_0^T energy dt)]``
    under the linearized dynamics for the record's horizon, and the integral
    is heavy tailed, so its median and 95th percentile ride along.
    """
    margin = model.nu_infinity() * e0
    report = NovikovReport(margin=margin, satisfied=bool(margin < 1.0))
    if record is None:
        return report
    if record.config.measure != "q_linear" or record.energy_int is None:
        raise ValueError("the exponential-moment proxy needs q_linear runs recording energy_int")
    integral = record.energy_int[:, -1]
    expo = np.exp(integral)
    n = len(integral)
    report.horizon = record.config.horizon
    report.mc_estimate = float(expo.mean())
    report.mc_ci = float(1.96 * expo.std(ddof=1) / math.sqrt(n))
    report.integral_median = float(np.median(integral))
    report.integral_p95 = float(np.percentile(integral, 95.0))
    report.n_paths = n
    return report


def vnorm_blowup_indicator(records: Dict[int, PathRecord]) -> list:
    """Regularity-norm integral summaries across a truncation-level sweep.

    Growth without bound in the level is the signature of the missing
    regularity; the table reports the empirical trend and fits nothing.
    Records must share the horizon (trends at mismatched horizons say
    nothing).
    """
    rows = []
    horizons = {r.config.horizon for r in records.values()}
    if len(horizons) != 1:
        raise ValueError(f"records must share one horizon, got {sorted(horizons)}")
    for n_levels in sorted(records):
        rec = records[n_levels]
        if rec.vnorm_int is None:
            raise ValueError("blowup indicator needs vnorm_int recorded")
        final = rec.vnorm_int[:, -1]
        rows.append(
            BlowupRow(
                n_levels=n_levels,
                median=float(np.median(final)),
                p90=float(np.percentile(final, 90.0)),
                n_paths=rec.n_paths,
                horizon=rec.config.horizon,
            )
        )
    return rows


def embed_initial_state(x0: np.ndarray, n_levels: int) -> np.ndarray:
    """Zero-pad an initial state into a larger truncation for sweeps."""
    x0 = np.asarray(x0, dtype=float)
    if len(x0) > n_levels:
        raise ValueError(f"cannot embed {len(x0)} modes into {n_levels} levels")
    out = np.zeros(n_levels)
    out[: len(x0)] = x0
    return out
