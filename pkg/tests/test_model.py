"""Closed-form constants checked against brute-force partial summation."""

import math

import numpy as np
import pytest

from dyadic.errors import (
    DivergentSeries,
    InconclusiveSeries,
    InvalidModel,
    OverflowRisk,
)
from dyadic.model import MAX_LEVEL, Regularity, SpectralModel, TailHeuristic, validate_level

from conftest import tail_sum


def oracle_nu(ratio, n, n_terms=4000):
    return tail_sum(lambda i: ratio ** (-2.0 * i), n, n_terms)


def oracle_nu_inf(ratio, n_terms=4000):
    return tail_sum(lambda i: i * ratio ** (-2.0 * i), 1, n_terms)


def oracle_entropy(ratio, n_terms=500):
    nu_inf = oracle_nu_inf(ratio)
    weights = [oracle_nu(ratio, n) / nu_inf for n in range(1, n_terms)]
    return -math.fsum(w * math.log(w) for w in weights if w > 0.0)


class TestWavenumbers:
    def test_boundary_mode_is_zero(self, model2):
        assert model2.wavenumber(0) == 0.0

    def test_geometric_values(self, model2):
        assert model2.wavenumber(1) == 2.0
        assert model2.wavenumber(3) == 8.0

    def test_ratio_must_exceed_one(self):
        with pytest.raises(InvalidModel):
            SpectralModel.geometric(1.0)
        with pytest.raises(InvalidModel):
            SpectralModel.geometric(0.5)

    def test_custom_out_of_range(self):
        m = SpectralModel.custom([1.0, 2.0, 3.0])
        assert m.wavenumber(3) == 3.0
        with pytest.raises(IndexError):
            m.wavenumber(4)

    def test_custom_rejects_nonpositive(self):
        with pytest.raises(InvalidModel):
            SpectralModel.custom([1.0, -2.0])
        with pytest.raises(InvalidModel):
            SpectralModel.custom([1.0, float("inf")])

    def test_overflow_guard(self, model2):
        with pytest.raises(OverflowRisk):
            model2.wavenumber(2000)
        with pytest.raises(OverflowRisk):
            validate_level(MAX_LEVEL + 1)


class TestRates:
    def test_state_one(self, model2):
        rt = model2.rates(1)
        assert (rt.lam, rt.mu, rt.pi) == (4.0, 0.0, 1.0)

    @pytest.mark.parametrize("n,expected", [(2, (16.0, 4.0, 0.8)), (3, (64.0, 16.0, 0.8))])
    def test_direct_evaluation(self, model2, n, expected):
        rt = model2.rates(n)
        assert rt.lam == expected[0]
        assert rt.mu == expected[1]
        assert rt.pi == pytest.approx(expected[2], abs=1e-15)

    def test_pi_constant_above_one(self, model2):
        # pi_n = ratio**2 / (ratio**2 + 1) for every n >= 2
        for n in range(2, 30):
            assert model2.rates(n).pi == pytest.approx(4.0 / 5.0, rel=1e-14)


class TestOccupationConstants:
    def test_nu_against_partial_summation(self, model2):
        assert model2.nu(1) == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert model2.nu(2) == pytest.approx(1.0 / 12.0, abs=1e-12)
        for n in (1, 2, 5, 9):
            assert model2.nu(n) == pytest.approx(oracle_nu(2.0, n), abs=1e-12)

    def test_nu_infinity(self, model2):
        assert model2.nu_infinity() == pytest.approx(4.0 / 9.0, abs=1e-12)
        assert model2.nu_infinity() == pytest.approx(oracle_nu_inf(2.0), rel=1e-12)

    def test_nu_difference_identity(self, model2):
        # nu_n - nu_{n+1} = k_n**-2 exactly
        for n in range(1, 40):
            lhs = model2.nu(n) - model2.nu(n + 1)
            rhs = model2.wavenumber(n) ** -2
            assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_nu_partial_sums_increase_to_nu_inf(self, model2):
        partial = np.cumsum([model2.nu(n) for n in range(1, 60)])
        assert np.all(np.diff(partial) >= 0)
        assert np.all(np.diff(partial[:20]) > 0)
        assert partial[-1] == pytest.approx(model2.nu_infinity(), rel=1e-12)

    def test_nu_tail_sum(self, model2):
        oracle = math.fsum(oracle_nu(2.0, n) for n in range(61, 61 + 200))
        assert model2.nu_tail_sum(61) == pytest.approx(oracle, rel=1e-9)


class TestEntropyOffset:
    def test_closed_form_lambda2(self, model2):
        expected = (8.0 / 3.0) * math.log(2.0) - math.log(3.0)
        assert model2.entropy_offset() == pytest.approx(expected, abs=1e-12)
        assert model2.entropy_offset() == pytest.approx(0.749780, abs=1e-6)

    def test_against_partial_summation(self, model2):
        assert model2.entropy_offset() == pytest.approx(oracle_entropy(2.0), abs=1e-9)

    def test_larger_ratio_concentrates_mass(self):
        h2 = SpectralModel.geometric(2.0).entropy_offset()
        h10 = SpectralModel.geometric(10.0).entropy_offset()
        assert h10 < h2
        assert h10 == pytest.approx(oracle_entropy(10.0), abs=1e-9)

    def test_point_mass_has_zero_entropy(self):
        # single-term custom tail: nu_1 carries all the mass
        m = SpectralModel.custom([1.0] + [1e12] * 50)
        assert m.entropy_offset() == pytest.approx(0.0, abs=1e-9)


class TestChainStatistics:
    @pytest.mark.parametrize("i", [1, 7])
    def test_escape_probability_lambda2(self, model2, i):
        assert model2.escape_probability(i) == pytest.approx(0.75, abs=1e-12)
        oracle = 1.0 / (4.0**i * oracle_nu(2.0, i))
        assert model2.escape_probability(i) == pytest.approx(oracle, rel=1e-12)

    def test_escape_probability_lambda10(self):
        m = SpectralModel.geometric(10.0)
        assert m.escape_probability(1) == pytest.approx(99.0 / 100.0, abs=1e-12)

    def test_mean_visits(self, model2):
        assert model2.mean_visits(1) == pytest.approx(4.0 / 3.0, abs=1e-12)
        assert model2.mean_visits(2) == pytest.approx(5.0 / 3.0, abs=1e-12)
        assert model2.mean_visits(5) == pytest.approx(5.0 / 3.0, abs=1e-12)

    def test_visit_escape_identity(self, model2):
        # mean_visits(i) = 1 / (pi_i * sigma), the last-visit identity
        for i in (1, 2, 3, 6):
            prod = model2.mean_visits(i) * model2.rates(i).pi * model2.escape_probability(i)
            assert prod == pytest.approx(1.0, rel=1e-12)


class TestRateBound:
    def test_unit_energy(self, model2):
        assert model2.p_rate_bound(1.0) == pytest.approx(-0.25, abs=1e-12)

    def test_zero_energy_collapses_to_mean_rate(self, model2):
        assert model2.p_rate_bound(0.0) == pytest.approx(-9.0 / 4.0, abs=1e-12)

    def test_large_energy_gives_nothing(self, model2):
        assert model2.p_rate_bound(3.0) is None


class TestRegularity:
    def test_geometric_not_regular(self, model2):
        assert model2.regularity() is Regularity.NOT_REGULAR

    def test_constant_sequence_regular(self):
        # sum(n * 1) blows through the divergence bound quickly
        m = SpectralModel.custom([1.0] * 4000)
        assert m.regularity() is Regularity.REGULAR

    def test_linear_sequence_regular_with_configured_bound(self):
        # harmonic partial sums grow too slowly for the default bound; the
        # heuristic is explicitly configurable for exactly this situation
        heur = TailHeuristic(divergence_bound=10.0)
        m = SpectralModel.custom([float(n) for n in range(1, 1_000_001)], heuristic=heur)
        assert m.regularity() is Regularity.REGULAR

    def test_undecided_tail_raises(self):
        m = SpectralModel.custom([float(n) for n in range(1, 2000)])
        with pytest.raises(InconclusiveSeries) as exc:
            m.regularity()
        assert exc.value.partial_sum is not None

    def test_divergent_series_error_for_tail_quantities(self):
        m = SpectralModel.custom([1.0] * 4000)
        with pytest.raises(DivergentSeries):
            m.nu(1)

    def test_custom_convergent_matches_geometric(self, model2):
        ks = [2.0**n for n in range(1, 80)]
        m = SpectralModel.custom(ks)
        assert m.regularity() is Regularity.NOT_REGULAR
        assert m.nu(1) == pytest.approx(model2.nu(1), rel=1e-12)
        assert m.nu_infinity() == pytest.approx(model2.nu_infinity(), rel=1e-12)
        assert m.entropy_offset() == pytest.approx(model2.entropy_offset(), rel=1e-9)


class TestDecayConstants:
    def test_bundle(self, model2):
        dc = model2.decay_constants(5)
        assert dc.nu[0] == pytest.approx(1.0 / 3.0)
        assert dc.nu_inf == pytest.approx(4.0 / 9.0)
        assert not dc.regular
        assert dc.h > 0.0

    def test_survival_bounds_bracket(self, model2):
        # at t = 1: [exp(-3), exp(-9/4 + h)]
        assert model2.survival_lower_bound(1.0) == pytest.approx(math.exp(-3.0), rel=1e-12)
        up = model2.survival_upper_bound(1.0)
        assert up == pytest.approx(math.exp(-9.0 / 4.0 + model2.entropy_offset()), rel=1e-12)
        assert model2.survival_lower_bound(1.0) < up
