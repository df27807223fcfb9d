"""Path simulation of the truncated shell system under three dynamics.

Measures
--------
``p_nonlinear``   the original Ito dynamics: quadratic cascade drift, noise
                  exchange between neighbouring modes, per-mode damping.
``q_linear``      the linearized dynamics under the transformed measure:
                  same noise and damping, no quadratic drift.
``deterministic`` the zero-noise cascade (no damping either: the damping is
                  the Ito correction of the removed noise).

Truncation
----------
Modes ``1..N`` evolve with the boundary convention ``X_0 = X_{N+1} = 0``.
The damping ``-(k_n^2 + k_{n-1}^2) X_n / 2`` is kept in full at every mode,
including ``n = N``.  Summing the per-mode energy identities then gives,
pathwise, ``d(sum X_n^2) = -k_N^2 X_N^2 dt`` with no martingale part: both
stochastic truncations dissipate energy monotonically (up to scheme error),
and the second moments of the linearized system solve exactly the absorbing
truncated forward system, which is the cross-representation identity the
verification suite rests on.  Dropping the ``k_N^2`` half of the top-mode
damping would instead reproduce the reflecting truncation and break that
identity.

Measure change
--------------
Only increments ``dW_1..dW_{N-1}`` survive truncation, so the density
between the two stochastic systems needs the drift shift only for modes
``1..N-1``.  The tracker accumulates ``m = sum_n int X_n dW_n`` and
``qv = int sum_n X_n^2 ds`` over those modes, with
``log dQ/dP = -m - qv/2``.  Per step the reweighting is exact in
distribution for both schemes below because drift and noise enter with the
same weight, so reweighted nonlinear paths land on the law of the simulated
linear scheme, not merely on its continuum limit.

Schemes
-------
``exponential_em``  damping integrated exactly, ``x' = a x + sqrt(a) (drift
                    dt + noise)`` with ``a = exp(-(k_n^2+k_{n-1}^2) dt)``.
                    The half-step weight on the transfer terms makes the
                    per-step second-moment map agree with the forward
                    equations to third order in (rate * dt); plain weighting
                    is first order and measurably biased at usable steps.
``explicit_em``     plain Euler-Maruyama, damping in the drift.  Requires
                    ``rate * dt < 1``; kept as a cross-check.

The stiffness lives entirely in the damping rates (up to
``k_N^2 + k_{N-1}^2``), so the default step policy scales ``dt`` by that
total rate.  Deterministic runs use classic RK4 on the cascade.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numba import njit

from .errors import ConfigError, DegenerateInput, SimulationDiverged
from .model import SpectralModel, validate_level
from .rng import sample_stream

MEASURES = ("p_nonlinear", "q_linear", "deterministic")
SCHEMES = ("exponential_em", "explicit_em")
OBSERVABLES = ("energy", "mode_sq", "vnorm_int", "energy_int", "girsanov")

#: paths per RNG stream / worker task; fixed so results cannot depend on
#: worker count or batching
PATH_CHUNK = 2048

#: noise values generated per kernel call (about 16 MB of float64)
NOISE_BLOCK = 2_000_000

#: energies below this are reported as exactly zero and flagged
ENERGY_FLOOR = 1e-300


@dataclass
class StateVector:
    """Truncated mode amplitudes at one instant."""

    t: float
    x: np.ndarray

    @property
    def n_levels(self) -> int:
        return len(self.x)

    def energy(self) -> float:
        return 0.5 * float(self.x @ self.x)


@dataclass
class GirsanovTracker:
    """Running martingale and quadratic variation of the measure change."""

    m: float = 0.0
    qv: float = 0.0


def girsanov_log_density(tracker: GirsanovTracker, direction: str) -> float:
    """Log Radon-Nikodym density at the tracker's current time.

    ``QoverP`` gives ``-m - qv/2`` and ``PoverQ`` the negation; the two sum
    to zero by construction.
    """
    if direction == "QoverP":
        return -tracker.m - 0.5 * tracker.qv
    if direction == "PoverQ":
        return tracker.m + 0.5 * tracker.qv
    raise ValueError(f"direction must be 'QoverP' or 'PoverQ', got {direction!r}")


@dataclass(frozen=True)
class PathConfig:
    """Everything one simulation run depends on, seed included."""

    measure: str
    horizon: float
    seed: int
    scheme: str = "exponential_em"
    dt_policy: Tuple[str, float] = ("stiffness_scaled", 0.1)
    n_rec: int = 50
    record: Tuple[str, ...] = ("energy",)
    tol_energy: float = 0.01

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise ConfigError(f"measure must be one of {MEASURES}, got {self.measure!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.horizon <= 0.0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.n_rec < 1:
            raise ConfigError(f"n_rec must be >= 1, got {self.n_rec}")
        kind, value = self.dt_policy
        if kind == "stiffness_scaled":
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"stiffness factor must be in (0, 1], got {value}")
        elif kind == "fixed":
            if value <= 0.0:
                raise ConfigError(f"fixed dt must be positive, got {value}")
        else:
            raise ConfigError(f"dt policy must be 'stiffness_scaled' or 'fixed', got {kind!r}")
        unknown = set(self.record) - set(OBSERVABLES)
        if unknown:
            raise ConfigError(f"unknown observables {sorted(unknown)}; valid: {OBSERVABLES}")
        if "girsanov" in self.record and self.measure != "p_nonlinear":
            raise ConfigError("the measure-change tracker only exists for p_nonlinear runs")
        if self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative 64-bit integer, got {self.seed}")


@dataclass
class PathRecord:
    """Observables of a batch of paths on the record grid (paths first axis)."""

    t: np.ndarray
    energy: np.ndarray
    n_levels: int
    config: PathConfig
    dt: float
    mode_sq: Optional[np.ndarray] = None
    vnorm_int: Optional[np.ndarray] = None
    energy_int: Optional[np.ndarray] = None
    girsanov_m: Optional[np.ndarray] = None
    girsanov_qv: Optional[np.ndarray] = None
    clamped: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.energy.shape[0]

    def log_weight(self, direction: str, time_index: int = -1) -> np.ndarray:
        """Per-path log density at a record time; needs the tracker recorded."""
        if self.girsanov_m is None:
            raise ValueError("run did not record the measure-change tracker")
        m = self.girsanov_m[:, time_index]
        qv = self.girsanov_qv[:, time_index]
        if direction == "QoverP":
            return -m - 0.5 * qv
        if direction == "PoverQ":
            return m + 0.5 * qv
        raise ValueError(f"direction must be 'QoverP' or 'PoverQ', got {direction!r}")


# -- kernels -----------------------------------------------------------------


@njit(cache=True, nogil=True)
def _advance_stochastic(x, z, sqdt, dt, kmid, alpha, alphah, nonlinear,
                        track, m_acc, qv_acc,
                        acc_vnorm, vnorm_int, ksq,
                        acc_eint, energy_int):
    """Advance paths through z.shape[0] steps in place.

    Integral observables accumulate left-endpoint Riemann sums; the tracker
    uses the pre-step state against the step's own increments, which is the
    Ito (left-endpoint) reading of the stochastic integral.
    """
    nsteps, n_paths, n_ch = z.shape
    n_modes = x.shape[1]
    for s in range(nsteps):
        for p in range(n_paths):
            if track:
                mm = 0.0
                qq = 0.0
                for j in range(n_ch):
                    mm += x[p, j] * z[s, p, j]
                    qq += x[p, j] * x[p, j]
                m_acc[p] += mm * sqdt
                qv_acc[p] += qq * dt
            if acc_vnorm:
                vv = 0.0
                for n in range(n_modes):
                    vv += ksq[n] * x[p, n] * x[p, n]
                vnorm_int[p] += vv * dt
            if acc_eint:
                ee = 0.0
                for n in range(n_modes):
                    ee += x[p, n] * x[p, n]
                energy_int[p] += 0.5 * ee * dt
            prev = 0.0
            for n in range(n_modes):
                eta = 0.0
                if n >= 1:
                    eta += kmid[n - 1] * prev * z[s, p, n - 1]
                if n <= n_modes - 2:
                    eta -= kmid[n] * x[p, n + 1] * z[s, p, n]
                eta *= sqdt
                if nonlinear:
                    drift = 0.0
                    if n >= 1:
                        drift += kmid[n - 1] * prev * prev
                    if n <= n_modes - 2:
                        drift -= kmid[n] * x[p, n] * x[p, n + 1]
                    eta += drift * dt
                prev = x[p, n]
                x[p, n] = alpha[n] * x[p, n] + alphah[n] * eta


@njit(cache=True, nogil=True)
def _cascade_rhs(row, kmid, out):
    n_modes = row.shape[0]
    for n in range(n_modes):
        d = 0.0
        if n >= 1:
            d += kmid[n - 1] * row[n - 1] * row[n - 1]
        if n <= n_modes - 2:
            d -= kmid[n] * row[n] * row[n + 1]
        out[n] = d


@njit(cache=True, nogil=True)
def _advance_deterministic(x, nsteps, dt, kmid,
                           acc_vnorm, vnorm_int, ksq,
                           acc_eint, energy_int):
    """Classic RK4 on the zero-noise cascade, in place."""
    n_paths, n_modes = x.shape
    k1 = np.empty(n_modes)
    k2 = np.empty(n_modes)
    k3 = np.empty(n_modes)
    k4 = np.empty(n_modes)
    tmp = np.empty(n_modes)
    for s in range(nsteps):
        for p in range(n_paths):
            if acc_vnorm:
                vv = 0.0
                for n in range(n_modes):
                    vv += ksq[n] * x[p, n] * x[p, n]
                vnorm_int[p] += vv * dt
            if acc_eint:
                ee = 0.0
                for n in range(n_modes):
                    ee += x[p, n] * x[p, n]
                energy_int[p] += 0.5 * ee * dt
            _cascade_rhs(x[p], kmid, k1)
            for n in range(n_modes):
                tmp[n] = x[p, n] + 0.5 * dt * k1[n]
            _cascade_rhs(tmp, kmid, k2)
            for n in range(n_modes):
                tmp[n] = x[p, n] + 0.5 * dt * k2[n]
            _cascade_rhs(tmp, kmid, k3)
            for n in range(n_modes):
                tmp[n] = x[p, n] + dt * k3[n]
            _cascade_rhs(tmp, kmid, k4)
            for n in range(n_modes):
                x[p, n] += dt / 6.0 * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n])


# -- coefficients -------------------------------------------------------------


def stiffness_dt(model: SpectralModel, n_levels: int, factor: float) -> float:
    """Step bound factor / (k_N^2 + k_{N-1}^2), the total top-mode rate."""
    return factor / (model.wavenumber(n_levels) ** 2 + model.wavenumber(n_levels - 1) ** 2)


def _coefficients(model: SpectralModel, n_levels: int):
    k = model.wavenumbers(n_levels)
    kmid = k[1:n_levels]                      # k_1..k_{N-1}: transfer coefficients
    damp = 0.5 * (k[1:] ** 2 + k[:-1] ** 2)   # full damping, top mode included
    ksq = k[1:] ** 2                          # V-norm weights
    return kmid, damp, ksq


def _scheme_weights(scheme: str, damp: np.ndarray, dt: float):
    if scheme == "exponential_em":
        return np.exp(-damp * dt), np.exp(-0.5 * damp * dt)
    rate_dt = damp.max() * dt
    if rate_dt >= 1.0:
        raise ConfigError(
            f"explicit_em is unstable at rate*dt = {2 * rate_dt:.3g}; shrink dt"
        )
    return 1.0 - damp * dt, np.ones_like(damp)


def _resolve_dt(model: SpectralModel, n_levels: int, config: PathConfig):
    kind, value = config.dt_policy
    target = stiffness_dt(model, n_levels, value) if kind == "stiffness_scaled" else value
    span = config.horizon / config.n_rec
    per_seg = max(1, math.ceil(span / target))
    return span / per_seg, per_seg


# -- single steps (hand-check and composition units) ---------------------------


def _single_step(model, state, dt, noise, nonlinear, scheme):
    x = np.asarray(state.x, dtype=float).reshape(1, -1).copy()
    n_levels = validate_level(x.shape[1])
    if len(noise) != n_levels - 1:
        raise ValueError(f"need {n_levels - 1} noise increments, got {len(noise)}")
    kmid, damp, ksq = _coefficients(model, n_levels)
    alpha, alphah = _scheme_weights(scheme, damp, dt)
    z = np.asarray(noise, dtype=float).reshape(1, 1, -1)
    dummy = np.zeros(1)
    # noise arrives pre-scaled by sqrt(dt) under the caller contract
    _advance_stochastic(x, z, 1.0, dt, kmid, alpha, alphah, nonlinear,
                        False, dummy, dummy, False, dummy, ksq, False, dummy)
    if not np.all(np.isfinite(x)):
        raise SimulationDiverged(f"state left the finite range at t = {state.t + dt}")
    return StateVector(t=state.t + dt, x=x[0])


def step_nonlinear_p(model: SpectralModel, state: StateVector, dt: float,
                     noise: np.ndarray, scheme: str = "exponential_em") -> StateVector:
    """One step of the nonlinear dynamics; noise entries are N(0, dt)."""
    return _single_step(model, state, dt, noise, True, scheme)


def step_linear_q(model: SpectralModel, state: StateVector, dt: float,
                  noise: np.ndarray, scheme: str = "exponential_em") -> StateVector:
    """One step of the linearized dynamics; noise entries are N(0, dt)."""
    return _single_step(model, state, dt, noise, False, scheme)


# -- path drivers --------------------------------------------------------------


def _run_chunk(model, x0, config, chunk_index, n_paths, dt, per_seg):
    n_levels = len(x0)
    kmid, damp, ksq = _coefficients(model, n_levels)
    deterministic = config.measure == "deterministic"
    if not deterministic:
        alpha, alphah = _scheme_weights(config.scheme, damp, dt)
    nonlinear = config.measure == "p_nonlinear"
    rec = set(config.record)
    want_msq = "mode_sq" in rec
    want_vni = "vnorm_int" in rec
    want_ein = "energy_int" in rec
    want_gir = "girsanov" in rec

    x = np.tile(np.asarray(x0, dtype=float), (n_paths, 1))
    n_grid = config.n_rec + 1
    energy = np.empty((n_paths, n_grid))
    clamped = np.zeros((n_paths, n_grid), dtype=np.bool_)
    mode_sq = np.empty((n_paths, n_grid, n_levels)) if want_msq else None
    vnorm_int = np.zeros(n_paths) if want_vni else np.zeros(1)
    energy_int = np.zeros(n_paths) if want_ein else np.zeros(1)
    m_acc = np.zeros(n_paths) if want_gir else np.zeros(1)
    qv_acc = np.zeros(n_paths) if want_gir else np.zeros(1)
    vnorm_rec = np.empty((n_paths, n_grid)) if want_vni else None
    eint_rec = np.empty((n_paths, n_grid)) if want_ein else None
    m_rec = np.empty((n_paths, n_grid)) if want_gir else None
    qv_rec = np.empty((n_paths, n_grid)) if want_gir else None

    stream = sample_stream(config.seed, chunk_index)
    sqdt = math.sqrt(dt)
    n_ch = n_levels - 1
    block_steps = max(1, NOISE_BLOCK // max(1, n_paths * n_ch))

    def record(j):
        e = 0.5 * (x * x).sum(axis=1)
        if not np.all(np.isfinite(e)):
            raise SimulationDiverged(
                f"{int((~np.isfinite(e)).sum())} paths left the finite range near t = {j * dt * per_seg}"
            )
        tiny = e < ENERGY_FLOOR
        e[tiny] = 0.0
        clamped[:, j] = tiny
        energy[:, j] = e
        if want_msq:
            mode_sq[:, j, :] = x * x
        if want_vni:
            vnorm_rec[:, j] = vnorm_int
        if want_ein:
            eint_rec[:, j] = energy_int
        if want_gir:
            m_rec[:, j] = m_acc
            qv_rec[:, j] = qv_acc

    record(0)
    for seg in range(config.n_rec):
        todo = per_seg
        while todo > 0:
            bs = min(todo, block_steps)
            if deterministic:
                _advance_deterministic(x, bs, dt, kmid,
                                       want_vni, vnorm_int, ksq,
                                       want_ein, energy_int)
            else:
                z = stream.standard_normal((bs, n_paths, n_ch))
                _advance_stochastic(x, z, sqdt, dt, kmid, alpha, alphah, nonlinear,
                                    want_gir, m_acc, qv_acc,
                                    want_vni, vnorm_int, ksq,
                                    want_ein, energy_int)
            todo -= bs
        record(seg + 1)

    return energy, clamped, mode_sq, vnorm_rec, eint_rec, m_rec, qv_rec


def simulate_paths(
    model: SpectralModel,
    x0: np.ndarray,
    config: PathConfig,
    n_paths: int,
    workers: int = 1,
) -> PathRecord:
    """Simulate a batch of independent paths from a shared initial state.

    Paths are split into fixed chunks of :data:`PATH_CHUNK`; chunk ``i``
    draws from the counter-based stream keyed ``(seed, i)``, so the batch is
    reproducible for any worker count.
    """
    x0 = np.asarray(x0, dtype=float)
    n_levels = validate_level(len(x0))
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    dt, per_seg = _resolve_dt(model, n_levels, config)
    sizes = [min(PATH_CHUNK, n_paths - lo) for lo in range(0, n_paths, PATH_CHUNK)]

    def task(ci):
        return _run_chunk(model, x0, config, ci, sizes[ci], dt, per_seg)

    if workers > 1 and len(sizes) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(task, range(len(sizes))))
    else:
        parts = [task(ci) for ci in range(len(sizes))]

    def cat(i):
        if parts[0][i] is None:
            return None
        return np.concatenate([p[i] for p in parts], axis=0)

    t = np.linspace(0.0, config.horizon, config.n_rec + 1)
    return PathRecord(
        t=t,
        energy=cat(0),
        n_levels=n_levels,
        config=config,
        dt=dt,
        clamped=cat(1),
        mode_sq=cat(2),
        vnorm_int=cat(3),
        energy_int=cat(4),
        girsanov_m=cat(5),
        girsanov_qv=cat(6),
    )


def simulate_path(model: SpectralModel, x0: np.ndarray, config: PathConfig) -> PathRecord:
    """Single-path convenience wrapper around :func:`simulate_paths`."""
    return simulate_paths(model, x0, config, n_paths=1)


# -- estimators ----------------------------------------------------------------


def estimate_decay_rate(t: np.ndarray, energy: np.ndarray, window: float = 0.5,
                        min_samples: int = 10) -> float:
    """Least-squares slope of log energy over the trailing window of samples.

    Clamped-to-zero energies are excluded from the fit; if the window holds
    fewer than ``min_samples`` usable points after exclusion the sentinel
    ``-inf`` is returned (the energy hit numerical zero, decay is beyond
    measurement).  Negative energies are rejected outright.
    """
    t = np.asarray(t, dtype=float)
    energy = np.asarray(energy, dtype=float)
    if t.shape != energy.shape:
        raise ValueError("time and energy arrays must have matching shapes")
    if not 0.0 < window <= 1.0:
        raise ValueError(f"window must be in (0, 1], got {window}")
    n_tail = max(int(math.ceil(window * len(t))), 2)
    t_w = t[-n_tail:]
    e_w = energy[-n_tail:]
    if len(t_w) < min_samples:
        raise DegenerateInput(f"{len(t_w)} samples in the tail window, need {min_samples}")
    if np.any(e_w < 0.0):
        raise DegenerateInput("negative energies in the tail window")
    keep = e_w > 0.0
    if keep.sum() < min_samples:
        return float("-inf")
    slope = np.polyfit(t_w[keep], np.log(e_w[keep]), 1)[0]
    return float(slope)
