"""Report assembly: decay rates, reweighted curves, diagnostics."""

import numpy as np
import pytest

from dyadic.analysis import (
    effective_sample_size,
    embed_initial_state,
    holder_energy_bound,
    novikov_diagnostic,
    p_weighted_energy,
    q_decay_report,
    vnorm_blowup_indicator,
)
from dyadic.errors import DegenerateInput
from dyadic.forward import build_generator, integrate
from dyadic.sde import PathConfig, simulate_paths

SEED = 314


@pytest.fixture(scope="module")
def q_batch(model2):
    cfg = PathConfig(measure="q_linear", horizon=1.0, seed=SEED, n_rec=50,
                     dt_policy=("stiffness_scaled", 0.25),
                     record=("energy", "energy_int"))
    x0 = np.zeros(8)
    x0[0] = 0.2
    return simulate_paths(model2, x0, cfg, n_paths=128, workers=2)


@pytest.fixture(scope="module")
def p_batch(model2):
    cfg = PathConfig(measure="p_nonlinear", horizon=0.4, seed=SEED + 1, n_rec=8,
                     dt_policy=("stiffness_scaled", 0.25),
                     record=("energy", "girsanov"))
    x0 = np.zeros(6)
    x0[0] = 1.0
    return simulate_paths(model2, x0, cfg, n_paths=4000, workers=2)


class TestEffectiveSampleSize:
    def test_constant_weights(self):
        assert effective_sample_size(np.ones(40)) == pytest.approx(40.0)

    def test_bounded_by_count(self):
        rng = np.random.default_rng(0)
        w = np.exp(rng.normal(size=200))
        assert effective_sample_size(w) <= 200.0


class TestDecayReport:
    def test_median_below_mean_rate_line(self, model2, q_batch):
        rep = q_decay_report(model2, q_batch)
        assert rep.median_slope <= -1.0 / model2.nu_infinity() + 0.5
        assert rep.short_horizon  # 1.0 < 5 * (4/9)

    def test_reference_lines(self, model2, q_batch):
        rep = q_decay_report(model2, q_batch)
        assert rep.reference_lines["-1/nu_1"] == pytest.approx(-3.0)
        assert rep.reference_lines["-1/nu_inf"] == pytest.approx(-2.25)
        # e0 = 0.02 -> bound defined, ordering -1/nu_1 <= -1/nu_inf < 0
        assert rep.reference_lines["-1/nu_1"] <= rep.reference_lines["-1/nu_inf"] < 0.0
        assert "p_rate_bound" in rep.reference_lines

    def test_degenerate_zero_start(self, model2):
        cfg = PathConfig(measure="q_linear", horizon=0.5, seed=SEED, n_rec=20,
                         dt_policy=("stiffness_scaled", 0.5))
        rec = simulate_paths(model2, np.zeros(4), cfg, n_paths=8)
        with pytest.raises(DegenerateInput):
            q_decay_report(model2, rec)

    def test_requires_q_measure(self, model2, p_batch):
        with pytest.raises(ValueError):
            q_decay_report(model2, p_batch)


class TestHolderBound:
    def test_trivial_at_early_times(self, model2):
        t = np.array([0.0, 0.01])
        b = holder_energy_bound(model2, 0.5, t)
        assert np.allclose(b, 0.5)  # below the exponent-admissibility time

    def test_asymptotic_slope_matches_rate_bound(self, model2):
        e0 = 0.5
        t = np.array([40.0, 50.0])
        b = holder_energy_bound(model2, e0, t)
        slope = (np.log(b[1]) - np.log(b[0])) / 10.0
        assert slope == pytest.approx(model2.p_rate_bound(e0), rel=0.05)

    def test_zero_energy(self, model2):
        assert np.all(holder_energy_bound(model2, 0.0, np.array([1.0, 2.0])) == 0.0)


class TestWeightedEnergy:
    def test_t0_both_curves_equal_e0(self, model2, p_batch):
        curve = p_weighted_energy(model2, p_batch)
        assert curve.p_mean[0] == pytest.approx(0.5)
        assert curve.q_mean[0] == pytest.approx(0.5)
        assert curve.ess[0] == pytest.approx(p_batch.n_paths)

    def test_weighted_matches_forward_absorbing(self, model2, p_batch):
        curve = p_weighted_energy(model2, p_batch)
        gen = build_generator(model2, 6, "absorbing")
        p0 = np.zeros(6)
        p0[0] = 1.0
        sol = integrate(gen, p0, p_batch.t[1:], tol=1e-10)
        expect = 0.5 * sol.survival
        for j in range(1, len(curve.t)):
            if curve.usable[j]:
                se = curve.q_mean_ci[j] / 1.96
                assert abs(curve.q_mean[j] - expect[j - 1]) < 4.0 * se

    def test_p_mean_below_bound(self, model2, p_batch):
        curve = p_weighted_energy(model2, p_batch)
        assert np.all(curve.p_mean <= curve.p_mean_bound + 3.0 * curve.p_mean_ci / 1.96)

    def test_ess_reported(self, p_batch, model2):
        curve = p_weighted_energy(model2, p_batch)
        assert np.all(curve.ess <= p_batch.n_paths + 1e-9)
        assert np.all(curve.ess[curve.usable] >= 50.0)


class TestNovikov:
    def test_margin_only(self, model2):
        rep = novikov_diagnostic(model2, 1.0)
        assert rep.margin == pytest.approx(4.0 / 9.0)
        assert rep.satisfied
        assert rep.mc_estimate is None

    def test_margin_violated(self, model2):
        rep = novikov_diagnostic(model2, 3.0)
        assert rep.margin == pytest.approx(4.0 / 3.0)
        assert not rep.satisfied

    def test_zero_energy_estimate_is_one(self, model2):
        cfg = PathConfig(measure="q_linear", horizon=0.2, seed=SEED, n_rec=4,
                         dt_policy=("stiffness_scaled", 0.5),
                         record=("energy", "energy_int"))
        rec = simulate_paths(model2, np.zeros(4), cfg, n_paths=16)
        rep = novikov_diagnostic(model2, 0.0, rec)
        assert rep.margin == 0.0
        assert rep.mc_estimate == pytest.approx(1.0)

    def test_finite_horizon_proxy(self, model2, q_batch):
        rep = novikov_diagnostic(model2, 0.02, q_batch)
        assert rep.satisfied
        assert rep.mc_estimate >= 1.0
        assert rep.integral_median <= rep.integral_p95
        # integral of a decaying energy from e0 = 0.02 stays below e0 * nu-ish scale
        assert rep.integral_p95 < 0.1


class TestBlowupTable:
    def test_deterministic_sweep_monotone(self, model2):
        records = {}
        for n in (4, 6, 8):
            cfg = PathConfig(measure="deterministic", horizon=1.0, seed=SEED, n_rec=4,
                             dt_policy=("fixed", 2e-5), record=("energy", "vnorm_int"))
            records[n] = simulate_paths(model2, embed_initial_state([1.0], n), cfg, 1)
        rows = vnorm_blowup_indicator(records)
        medians = [r.median for r in rows]
        assert medians == sorted(medians)
        assert rows[0].n_levels == 4 and rows[-1].n_levels == 8

    def test_zero_start_gives_zero(self, model2):
        cfg = PathConfig(measure="deterministic", horizon=0.1, seed=SEED, n_rec=2,
                         dt_policy=("fixed", 1e-4), record=("energy", "vnorm_int"))
        rec = simulate_paths(model2, np.zeros(4), cfg, 1)
        rows = vnorm_blowup_indicator({4: rec})
        assert rows[0].median == 0.0

    def test_mismatched_horizons_rejected(self, model2):
        cfg1 = PathConfig(measure="deterministic", horizon=0.1, seed=SEED, n_rec=2,
                          dt_policy=("fixed", 1e-4), record=("energy", "vnorm_int"))
        cfg2 = PathConfig(measure="deterministic", horizon=0.2, seed=SEED, n_rec=2,
                          dt_policy=("fixed", 1e-4), record=("energy", "vnorm_int"))
        recs = {
            4: simulate_paths(model2, embed_initial_state([1.0], 4), cfg1, 1),
            6: simulate_paths(model2, embed_initial_state([1.0], 6), cfg2, 1),
        }
        with pytest.raises(ValueError):
            vnorm_blowup_indicator(recs)


class TestEmbed:
    def test_pads_with_zeros(self):
        out = embed_initial_state([1.0, 0.5], 5)
        assert np.array_equal(out, np.array([1.0, 0.5, 0.0, 0.0, 0.0]))

    def test_rejects_shrinking(self):
        with pytest.raises(ValueError):
            embed_initial_state([1.0, 0.5, 0.3], 2)
