"""Summary and convergence-statistic tests against analytic oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bnpreg.diagnostics import (
    batch_means_mcci,
    cusum_hairiness,
    summarize,
    summary_table_csv,
    summary_table_text,
    trace,
)
from bnpreg.errors import ValidationError
from bnpreg.mcmc import SampleStore

from oracles import batch_means_halfwidth_iid_target


def _store(values, burn_in=0):
    store = SampleStore(["iteration", "theta"], thin=1, burn_in=burn_in)
    for i, v in enumerate(values, start=1):
        store.append([float(i), float(v)])
    return store


class TestSummarize:
    def test_constant_chain(self):
        rows = summarize(_store([4.2] * 20))
        row = rows[0]
        assert row.mean == pytest.approx(4.2, abs=1e-12)
        assert row.median == 4.2
        assert row.sd == pytest.approx(0.0, abs=1e-12)
        assert row.mcci_mean == pytest.approx(0.0, abs=1e-12)

    def test_burn_in_discards_leading_draws(self):
        rows = summarize(_store([1, 2, 3, 4]), burn_in=2)
        assert rows[0].mean == 3.5
        assert math.isnan(rows[0].mcci_mean)  # too few draws for an interval

    def test_symmetric_chain_mean_matches_median(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=20_000)
        row = summarize(_store(v))[0]
        assert abs(row.mean - row.median) < 0.03

    def test_append_then_burn_in_is_invariant(self):
        rng = np.random.default_rng(2)
        tail = rng.normal(size=50)
        full = _store(np.concatenate([rng.normal(size=5) + 40.0, tail]))
        short = SampleStore(["iteration", "theta"], thin=1, burn_in=0)
        for i, v in enumerate(tail, start=6):
            short.append([float(i), float(v)])
        a = summarize(full, burn_in=5)[0]
        b = summarize(short, burn_in=5)[0]
        assert a == b

    def test_quantiles_are_ordered(self):
        rng = np.random.default_rng(3)
        row = summarize(_store(rng.standard_cauchy(size=500)))[0]
        assert row.q025 <= row.q25 <= row.median <= row.q75 <= row.q975

    def test_all_rows_excluded_is_an_error(self):
        with pytest.raises(ValidationError):
            summarize(_store([1.0, 2.0]), burn_in=2)

    def test_table_renderings_share_columns(self):
        rows = summarize(_store(np.linspace(0.0, 1.0, 30)))
        text = summary_table_text(rows)
        csv_text = summary_table_csv(rows)
        assert text.splitlines()[0].split()[0] == "parameter"
        header = csv_text.splitlines()[0].split(",")
        assert header[:8] == ["parameter", "mean", "median", "sd",
                              "2.5%", "25%", "75%", "97.5%"]
        assert "theta" in text and "theta" in csv_text


class TestBatchMeansInterval:
    def test_constant_chain_has_zero_width(self):
        assert batch_means_mcci(np.full(100, 7.0)) == 0.0

    def test_iid_normal_matches_analytic_half_width(self):
        rng = np.random.default_rng(5)
        hw = batch_means_mcci(rng.normal(size=10_000))
        target = batch_means_halfwidth_iid_target(10_000)
        assert abs(hw - 0.0196) / 0.0196 < 0.30
        assert abs(hw - target) / target < 0.30

    def test_correlated_chain_widens_the_interval(self):
        rng = np.random.default_rng(7)
        rho, s = 0.9, 2500
        b = int(math.isqrt(s))
        iid_value = float(stats.t.ppf(0.975, b - 1)) / b
        wider = 0
        for _ in range(100):
            innov = rng.normal(size=s) * math.sqrt(1.0 - rho * rho)
            chain = np.empty(s)
            chain[0] = rng.normal()
            for t in range(1, s):
                chain[t] = rho * chain[t - 1] + innov[t]
            if batch_means_mcci(chain) > iid_value:
                wider += 1
        assert wider >= 95

    def test_half_width_shrinks_at_root_s_rate(self):
        rng = np.random.default_rng(9)
        hw_small = batch_means_mcci(rng.normal(size=1000))
        hw_large = batch_means_mcci(rng.normal(size=100_000))
        ratio = hw_small / hw_large
        assert abs(ratio - 10.0) / 10.0 < 0.30

    def test_too_few_draws_raises(self):
        with pytest.raises(ValidationError):
            batch_means_mcci(np.arange(15.0))

    def test_estimand_variants(self):
        rng = np.random.default_rng(11)
        v = rng.normal(size=2500)
        assert batch_means_mcci(v, "sd") > 0.0
        assert batch_means_mcci(v, "quantile", q=0.25) > 0.0
        with pytest.raises(ValidationError):
            batch_means_mcci(v, "mode")
        with pytest.raises(ValidationError):
            batch_means_mcci(v, "quantile", q=1.5)


class TestCusumHairiness:
    def test_monotone_chain_has_vanishing_hairiness(self):
        s = 1000
        assert cusum_hairiness(np.arange(float(s))) <= 1.0 / (s - 2)

    def test_alternating_chain_is_maximally_hairy(self):
        v = np.tile([1.0, -1.0], 500)
        assert cusum_hairiness(v) == 1.0

    def test_iid_chain_sits_near_half(self):
        rng = np.random.default_rng(13)
        d = cusum_hairiness(rng.normal(size=10_000))
        assert abs(d - 0.5) <= 0.05

    def test_constant_chain_is_smooth(self):
        assert cusum_hairiness(np.full(50, 3.0)) == 0.0

    def test_short_chains_return_zero(self):
        assert cusum_hairiness(np.array([1.0, 2.0])) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=200))
    def test_range_property(self, values):
        d = cusum_hairiness(np.array(values))
        assert 0.0 <= d <= 1.0


class TestTrace:
    def test_full_window_returns_everything(self):
        store = _store(np.arange(25.0))
        its, vals = trace(store, "theta")
        assert its.size == 25 and vals[0] == 0.0 and vals[-1] == 24.0

    def test_window_keeps_endpoints(self):
        store = _store(np.arange(100.0))
        its, vals = trace(store, "theta", window=10)
        assert vals.size <= 10
        assert vals[0] == 0.0 and vals[-1] == 99.0
        assert np.all(np.diff(its) > 0)

    def test_window_of_one_returns_latest_point(self):
        store = _store(np.arange(10.0))
        its, vals = trace(store, "theta", window=1)
        assert list(its) == [10.0] and list(vals) == [9.0]

    def test_empty_store_gives_empty_series(self):
        store = SampleStore(["iteration", "theta"])
        its, vals = trace(store, "theta")
        assert its.size == 0 and vals.size == 0
