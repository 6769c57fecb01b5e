import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ertgap.corpus import FEATURES, GROUPS, TokenTable
from ertgap.effects import feature_contrasts, slope_ratio
from ertgap.errors import NumericalError, ValidationError
from ertgap.gapdecomp import decompose
from ertgap.headline import HeadlineStatistics, null_values, statistic_ids
from ertgap.inference import (
    bootstrap,
    bootstrap_many,
    bootstrap_p,
    draw_subjects,
    percentile_ci,
    resample_table,
)

from conftest import token_frame


def mean_trt(table: TokenTable) -> float:
    return float(table.fixated()["trt_ms"].mean())


class TestFormulas:
    def test_p_floor(self):
        b = 3000
        assert bootstrap_p(np.full(b, 2.0), 1.0) == pytest.approx(2 / (b + 1))
        assert bootstrap_p(np.full(b, 2.0), 1.0) == pytest.approx(6.664e-4, abs=1e-6)

    def test_p_capped_at_one(self):
        assert bootstrap_p(np.zeros(100), 0.0) == 1.0

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=200), st.floats(-10, 10))
    def test_p_in_range(self, samples, null):
        p = bootstrap_p(samples, null)
        assert 2 / (len(samples) + 1) <= p <= 1.0

    def test_percentile_interval(self):
        x = np.arange(1, 101, dtype=float)
        lo, hi = percentile_ci(x)
        assert lo == pytest.approx(np.quantile(x, 0.025))
        assert hi == pytest.approx(np.quantile(x, 0.975))

    def test_needs_forty(self):
        with pytest.raises(ValidationError):
            percentile_ci(np.arange(39.0))
        with pytest.raises(ValidationError):
            bootstrap(mean_trt, TokenTable.from_frame(token_frame()), b=39)


class TestResampling:
    def test_group_sizes_preserved_and_slots_distinct(self):
        table = TokenTable.from_frame(token_frame(10, subjects=("c1", "c2", "c3", "d1", "d2")))
        rng = np.random.default_rng(0)
        for _ in range(50):
            draws = draw_subjects(table, rng)
            res = resample_table(table, draws)
            for g in GROUPS:
                assert len(res.rosters[g]) == len(table.rosters[g])
                assert res.group_frame(g)["subject_id"].nunique() == len(table.rosters[g])
            np.testing.assert_array_equal(
                res.frame["trt_ms"].to_numpy(), table.frame["trt_ms"].to_numpy()[res.frame["source_row"]]
            )

    def test_same_seed_bit_identical(self):
        table = TokenTable.from_frame(token_frame(10))
        a = bootstrap(mean_trt, table, b=60, seed=7)
        b = bootstrap(mean_trt, table, b=60, seed=7)
        c = bootstrap(mean_trt, table, b=60, seed=7, n_jobs=3)
        assert a == b == c
        assert bootstrap(mean_trt, table, b=60, seed=8).trace_hash != a.trace_hash

    def test_failure_budget(self):
        table = TokenTable.from_frame(token_frame(10))

        def flaky(t):
            raise NumericalError("always")

        with pytest.raises(NumericalError):
            bootstrap(flaky, table, b=40)

    def test_undefined_statistic_reported_nan(self):
        table = TokenTable.from_frame(token_frame(10))
        res = bootstrap_many(lambda t: {"a": mean_trt(t), "b": math.nan}, table, b=40, require_finite=False)
        assert math.isfinite(res["a"].ci_low)
        assert math.isnan(res["b"].ci_low) and math.isnan(res["b"].p)


class TestHeadline:
    def test_ids_and_nulls(self):
        ids = statistic_ids()
        assert len(ids) == len(set(ids))
        nv = null_values()
        assert nv["sr/ert/length"] == 1.0 and nv["gap/g0"] == 0.0

    def test_base_values_match_modules(self, small_bundle, small_table, small_context):
        stats, bins = small_context
        h = HeadlineStatistics(small_bundle.models, small_table)
        out = h(h.base)
        models = small_bundle.models
        con = {g: feature_contrasts(models[g], stats, bins, g) for g in GROUPS}
        for g in GROUPS:
            for f in FEATURES:
                assert out[f"delta/ert/{g}/{f}"] == pytest.approx(con[g][f]["ert"].delta, rel=1e-12)
        for f in FEATURES:
            sr = slope_ratio(con["dyslexic"][f]["ert"], con["control"][f]["ert"]).sr
            assert out[f"sr/ert/{f}"] == pytest.approx(sr, rel=1e-12)
        dec = decompose(models, small_table, stats, bins)
        assert out["gap/g0"] == pytest.approx(dec.g0, rel=1e-10)
        assert out["gap/reduction"] == pytest.approx(dec.reduction, rel=1e-9)
        assert out["gap/skip"] == pytest.approx(dec.skip_contrib, rel=1e-10)
        for f in FEATURES:
            assert out[f"attr/{f}"] == pytest.approx(dec.feature_contribs[f], rel=1e-9)

    def test_resample_matches_direct_evaluation(self, small_bundle, small_table):
        h = HeadlineStatistics(small_bundle.models, small_table)
        draws = draw_subjects(h.base, np.random.default_rng(1))
        res = resample_table(h.base, draws)
        cached = h(res)
        fresh_table = TokenTable(res.frame.drop(columns="source_row"), res.rosters)
        direct = HeadlineStatistics(small_bundle.models, fresh_table)(fresh_table)
        for k in cached:
            assert cached[k] == pytest.approx(direct[k], rel=1e-9, abs=1e-12)

    def test_hold_fixed_keeps_bins(self, small_bundle, small_table):
        h = HeadlineStatistics(small_bundle.models, small_table, hold_fixed=True)
        stats, bins = h._context(h.base)
        assert bins is h.base_bins
        assert stats.q1 == h.base_stats.q1

    @settings(max_examples=5, deadline=None)
    @given(st.integers(0, 10_000))
    def test_shapley_split_exact_on_any_resample(self, small_bundle, small_table, seed):
        h = HeadlineStatistics(small_bundle.models, small_table)
        res = resample_table(h.base, draw_subjects(h.base, np.random.default_rng(seed)))
        out = h(res)
        assert out["gap/skip"] + out["gap/duration"] == pytest.approx(out["gap/common"], abs=1e-10)
