import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vflossy.analysis import (
    BoundInputs,
    GridConfig,
    GridRow,
    bootstrap_quantile,
    epsilon_coding_rate,
    extension_delta,
    extension_rate_delta_scan,
    grid_point,
    hessian_bound,
    letters,
    manifest,
    overflow_from_rates,
    overflow_probability,
    q_inverse,
    rate_quantile,
    rows_from_csv,
    rows_to_csv,
    run_trials,
    sample_check,
    sample_stream,
    sandwich,
    theorem_bound,
    transitional_count_report,
    trial_uniforms,
    type_deviation_mass,
    wilson_interval,
)
from vflossy.dictionary import DictionaryBuilder
from vflossy.errors import ValidationError
from vflossy.rd_core import DistortionSpec, rate_distortion
from vflossy.typespace import TypeClass

from oracles import h2, multinomial_tail


def H(D, k=2):
    return DistortionSpec.hamming(k, D)


@pytest.fixture(scope="module")
def small():
    b = DictionaryBuilder(H(0.1))
    return b.build(b.choose_gamma(256).gamma, 256).dictionary


class TestSampling:
    def test_degenerate_source(self):
        assert sample_stream((1.0, 0.0), 500, seed=3).tolist() == [0] * 500

    def test_seeded(self):
        a = sample_stream((0.3, 0.7), 1000, seed=9)
        assert np.array_equal(a, sample_stream((0.3, 0.7), 1000, seed=9))
        assert not np.array_equal(a, sample_stream((0.3, 0.7), 1000, seed=10))

    def test_frequency(self):
        x = sample_stream((0.3, 0.7), 10**6, seed=0)
        assert abs((x == 0).mean() - 0.3) < 0.005
        gap, ok = sample_check(x, (0.3, 0.7))
        assert ok and gap < 0.01

    def test_trial_rows_independent_of_chunking(self):
        whole = trial_uniforms(5, 0, 10, 7)
        parts = np.vstack([trial_uniforms(5, i, 1, 7) for i in range(10)])
        assert np.array_equal(whole, parts)

    def test_letters_ternary(self):
        u = np.array([0.0, 0.19, 0.2, 0.49, 0.5, 0.99])
        assert letters(u, (0.2, 0.3, 0.5)).tolist() == [0, 0, 1, 1, 2, 2]

    def test_bad_length(self):
        with pytest.raises(ValidationError):
            sample_stream((0.5, 0.5), 0, 1)


class TestTrials:
    def test_records(self, small):
        ts = run_trials((0.3, 0.7), small, 2000, seed=1)
        assert ts.trials == 2000
        recs = list(ts.records())
        assert all(r.rate_sample > 0 and r.distortion <= 0.1 for r in recs)
        assert all(1 <= r.length <= small.max_len for r in recs)
        assert recs[5].rate_sample == small.index_width / recs[5].length

    def test_chunking_invariant(self, small):
        a = run_trials((0.3, 0.7), small, 3000, seed=2, chunk=3000)
        b = run_trials((0.3, 0.7), small, 3000, seed=2, chunk=257)
        assert np.array_equal(a.lengths, b.lengths)
        assert np.array_equal(a.indices, b.indices)

    def test_alphabet_mismatch(self, small):
        with pytest.raises(ValidationError):
            run_trials((0.2, 0.3, 0.5), small, 10, 0)


class TestOverflow:
    def test_edges(self, small):
        assert overflow_probability((0.3, 0.7), small, 0.0, 1000, 0).value == 1.0
        assert overflow_probability((0.3, 0.7), small, small.index_width + 0.1, 1000, 0).value == 0.0

    def test_median_self_consistency(self, store):
        d = store.get(H(0.1), 2**12)
        rates = run_trials((0.3, 0.7), d, 20_000, seed=4).rates
        med = float(np.median(rates))
        at = overflow_from_rates(rates, med)
        above = overflow_from_rates(rates, med, strict=True)
        # the median sits inside the atom at med: P(rate > med) <= 1/2 <= P(rate >= med)
        assert above.value <= 0.5 <= at.value
        assert at.lo <= at.value <= at.hi

    def test_wilson(self):
        lo, hi = wilson_interval(50, 100)
        assert lo < 0.5 < hi
        # endpoints solve (ph - pi)^2 = z^2 pi (1 - pi) / n
        z, n, ph = 1.959963984540054, 100, 0.5
        roots = sorted(np.roots([1 + z * z / n, -(2 * ph + z * z / n), ph * ph]).real)
        assert (lo, hi) == pytest.approx(tuple(roots), abs=1e-12)
        assert wilson_interval(0, 100)[0] == 0.0


class TestQuantile:
    def test_point_mass(self, small):
        ts = run_trials((1.0, 0.0), small, 500, seed=0)
        assert len(set(ts.lengths.tolist())) == 1
        for eps in (0.01, 0.3, 0.9):
            assert rate_quantile(ts.rates, eps) == ts.rates[0]

    def test_near_one_is_minimum(self):
        rates = np.random.default_rng(0).uniform(0.5, 2.0, 1000)
        assert rate_quantile(rates, 1 - 1e-9) == rates.min()

    @given(st.lists(st.sampled_from([0.25, 0.5, 0.75, 1.0, 2.0]), min_size=1, max_size=60),
           st.floats(0.001, 0.999), st.floats(0.001, 0.999))
    def test_monotone_and_sane(self, values, e1, e2):
        rates = np.array(values)
        lo, hi = sorted((e1, e2))
        assert rate_quantile(rates, lo) >= rate_quantile(rates, hi)
        for eps in (lo, hi):
            q = rate_quantile(rates, eps)
            assert overflow_from_rates(rates, q, strict=True).value <= eps + 1e-12
            # nothing smaller works
            smaller = rates[rates < q]
            if smaller.size:
                assert overflow_from_rates(rates, smaller.max(), strict=True).value > eps

    def test_estimator_sanity(self, small):
        ts = run_trials((0.3, 0.7), small, 5000, seed=6)
        for eps in (0.05, 0.1, 0.25):
            q = rate_quantile(ts.rates, eps)
            assert overflow_from_rates(ts.rates, q, strict=True).value <= eps

    def test_bootstrap_brackets(self, small):
        est = epsilon_coding_rate((0.3, 0.7), small, 0.1, 5000, seed=7)
        assert est.lo <= est.value <= est.hi
        rates = run_trials((0.3, 0.7), small, 5000, seed=7).rates
        assert bootstrap_quantile(rates, 0.1, seed=7) == (est.lo, est.hi)

    def test_bad_eps(self):
        with pytest.raises(ValidationError):
            rate_quantile(np.ones(3), 1.0)


class TestBound:
    def test_q_inverse(self):
        for eps in (0.01, 0.05, 0.1, 0.25, 0.5, 0.9):
            assert q_inverse(eps) == pytest.approx(NormalDist().inv_cdf(1 - eps), abs=1e-9)
        assert q_inverse(0.1) == pytest.approx(1.2816, abs=1e-4)
        assert q_inverse(0.5) == 0.0

    def test_uniform_source(self):
        b = theorem_bound(BoundInputs((0.5, 0.5), H(0.1), 2**16, 0.1, 4.0, 2.0))
        R = 1 - h2(0.1)
        c3 = 4 + 1 + 2.0 * 3
        assert b.sigma == pytest.approx(0, abs=1e-6)
        assert b.value == pytest.approx(R * (1 + c3 * 4 / 16), abs=1e-6)

    def test_plug_in(self):
        C_H = 1.7
        b = theorem_bound(BoundInputs((0.3, 0.7), H(0.1), 2**16, 0.1, 4.0, C_H))
        R = h2(0.3) - h2(0.1)
        sigma = math.sqrt(0.21) * math.log2(7 / 3)
        q = NormalDist().inv_cdf(0.9)
        want = R + sigma * math.sqrt(R / 16) * q + (4 + 1 + 3 * C_H) * R * 4 / 16
        assert R == pytest.approx(0.4123, abs=1e-4)
        assert sigma**2 == pytest.approx(0.3137, abs=1e-4)
        assert b.value == pytest.approx(want, abs=1e-7)

    def test_median_kills_second_order(self):
        b = theorem_bound(BoundInputs((0.3, 0.7), H(0.1), 2**12, 0.5, 4.0, 1.0))
        assert b.second == 0.0

    def test_slack(self):
        a = theorem_bound(BoundInputs((0.3, 0.7), H(0.1), 2**12, 0.1, 4.0, 1.0))
        b = theorem_bound(BoundInputs((0.3, 0.7), H(0.1), 2**12, 0.1, 4.0, 1.0), slack_c=6.0)
        assert b.value - a.value == pytest.approx(0.5)

    def test_inputs_validated(self):
        with pytest.raises(ValidationError):
            BoundInputs((0.5, 0.5), H(0.1), 2**10, 1.0, 4.0, 1.0)
        with pytest.raises(ValidationError):
            BoundInputs((0.5, 0.5), H(0.1), 2, 0.1, 4.0, 1.0)
        with pytest.raises(ValidationError):
            BoundInputs((0.5, 0.5), H(0.1), 2**10, 0.1, math.inf, 1.0)

    def test_hessian_bound(self):
        hb = hessian_bound((0.3, 0.7), H(0.1), 2**16)
        q = hb.argmax[0]
        assert hb.evaluated > 0
        assert hb.C_H == pytest.approx((1 / q + 1 / (1 - q)) / (2 * math.log(2)), rel=1e-2)
        assert hb.C_H >= (1 / 0.3 + 1 / 0.7) / (2 * math.log(2)) * (1 - 1e-3)


class TestDiagnostics:
    def test_constant_sequence_same_letter(self):
        spec = H(0.0)
        for n in (1, 5, 40):
            r0 = rate_distortion(TypeClass((n, 0)).pmf, spec).rate
            r1 = rate_distortion(TypeClass((n + 1, 0)).pmf, spec).rate
            assert r1 - r0 == 0

    def test_extension_delta_positive_part(self):
        assert extension_delta(TypeClass((3, 3)), H(0.0)) >= 0

    def test_scan(self):
        grid = [2**k for k in range(4, 11)]
        rep = extension_rate_delta_scan((0.3, 0.7), H(0.1), grid, seed=0)
        assert rep.ci[0] <= rep.beta <= rep.ci[1]
        assert rep.n_grid == tuple(grid)
        # doubling n shrinks delta by roughly 2^-beta
        ratios = np.array(rep.deltas[1:]) / np.array(rep.deltas[:-1])
        assert np.all(np.abs(np.log2(ratios) + rep.beta) < 1.0)
        assert 0.5 < rep.beta < 1.5
        assert rep.violates_stated

    def test_deviation_mass_single_letter(self):
        for p in ((0.5, 0.5), (1.0, 0.0)):
            m = type_deviation_mass(p, 1, math.sqrt(6))
            assert m.mass in (0.0, 1.0)
        assert type_deviation_mass((0.5, 0.5), 1, math.sqrt(6)).mass == 1.0
        assert type_deviation_mass((1.0, 0.0), 1, math.sqrt(6)).mass == 0.0

    def test_deviation_mass_oracle(self):
        m = type_deviation_mass((0.5, 0.5), 100, 2.0, check_a=False)
        assert m.exact
        assert m.mass == pytest.approx(multinomial_tail((0.5, 0.5), 100, m.threshold), rel=1e-9, abs=1e-300)
        assert m.mass <= math.e / 10**4

    def test_deviation_requires_large_a(self):
        with pytest.raises(ValidationError):
            type_deviation_mass((0.5, 0.5), 100, 2.0)

    @settings(max_examples=20)
    @given(st.integers(2, 120), st.floats(0.0, 4.0), st.floats(0.0, 4.0))
    def test_deviation_monotone_in_a(self, n, a, b):
        lo, hi = sorted((a, b))
        m_lo = type_deviation_mass((0.3, 0.7), n, lo, check_a=False).mass
        m_hi = type_deviation_mass((0.3, 0.7), n, hi, check_a=False).mass
        assert m_hi <= m_lo + 1e-15

    def test_deviation_monte_carlo(self):
        m = type_deviation_mass((0.5, 0.5), 400, math.sqrt(6), samples=20_000)
        assert not m.exact
        assert 0 <= m.mass <= 1

    def test_transitional_count(self):
        rep = transitional_count_report(H(0.1), 3.0, 20)
        assert len(rep.counts) == 20
        assert rep.max_ratio >= 2.0
        assert rep.violates_stated


def _row(M, eps, R_emp, bound, R=0.4, sigma=0.5, p="0.3;0.7"):
    return GridRow(p, 0.1, M, eps, R_emp, bound, R, sigma, 1.0, 10, R_emp, R_emp, 3.0, 12, 5.0, 0.0)


class TestGridPlumbing:
    def test_csv_round_trip(self):
        rows = [_row(2**10, 0.1, 0.7, 0.9), _row(2**12, 0.05, 0.65, 0.8)]
        text = rows_to_csv(rows)
        assert text.splitlines()[0].startswith("p,D,M,epsilon,R_empirical,bound")
        assert rows_from_csv(text) == rows

    def test_grid_point_rows(self, small):
        cfg = GridConfig(trials=2000)
        rows = grid_point((0.3, 0.7), small, 256, (0.05, 0.1, 0.25), cfg, 1.0)
        assert [r.epsilon for r in rows] == [0.05, 0.1, 0.25]
        assert rows[0].R_empirical >= rows[1].R_empirical >= rows[2].R_empirical
        assert all(r.ci_lo <= r.R_empirical <= r.ci_hi for r in rows)

    def test_manifest_digest(self):
        a = manifest(GridConfig())
        b = manifest(GridConfig(seed=1))
        assert a["config_digest"] != b["config_digest"]
        assert a["log_base"] == 2

    def test_sandwich_fit(self):
        # slack residual exactly 2 / log2 M on every M: c = 2, stable
        rows = []
        for k in (10, 12, 14, 16):
            for eps in (0.1, 0.25):
                rows.append(_row(2**k, eps, 1.0 + 2 / k, 1.0))
        rep = sandwich(rows)
        assert rep.c == pytest.approx(2.0)
        assert rep.stable and rep.holds

    def test_sandwich_unstable(self):
        rows = [_row(2**10, 0.1, 1.1, 1.0), _row(2**16, 0.1, 1.0 + 0.1 / 16, 1.0)]
        assert not sandwich(rows).stable

    def test_intercept_recovery(self):
        R, sigma = 0.4, 0.5
        want = sigma * q_inverse(0.1)
        rows = []
        for k in (10, 12, 14, 16):
            y = want + 0.3 / math.sqrt(k) + 0.2 * math.log2(k) / math.sqrt(k)
            rows.append(_row(2**k, 0.1, R + y / math.sqrt(k / R), 2.0, R=R, sigma=sigma))
        rep = sandwich(rows)
        (got, w), = rep.intercepts.values()
        assert got == pytest.approx(want, rel=1e-9)
        assert rep.intercept_ok
