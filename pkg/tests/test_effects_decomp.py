import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ertgap.corpus import FEATURES, GROUPS
from ertgap.effects import (
    Contrast,
    ert,
    feature_contrasts,
    q1q3_contrast,
    slope_ratio,
)
from ertgap.errors import UndefinedRatioError, ValidationError
from ertgap.gapdecomp import (
    attribute_features,
    baseline_gap,
    clamp_equal_ease,
    decompose,
    equal_ease,
    feature_attribution,
    interaction_configurations,
    pathway_shapley,
    subject_balanced_mean,
)
from ertgap.modeling import ModelConfig


class TestERT:
    def test_identity_and_bounds(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0, 1, 1000)
        t = rng.uniform(0, 2000, 1000)
        np.testing.assert_array_equal(ert(p, t), (1 - p) * t)
        assert ert(1.0, 250.0) == 0.0
        assert ert(0.0, 250.0) == 250.0

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValidationError):
            ert(1.2, 100.0)
        with pytest.raises(ValidationError):
            ert(0.5, -1.0)
        with pytest.raises(ValidationError):
            ert(np.nan, 1.0)

    @given(st.floats(0, 1), st.floats(0, 1e4))
    def test_between_zero_and_trt(self, p, t):
        assert 0.0 <= ert(p, t) <= t


def _contrast(deltas, weights, feature="zipf", pathway="ert", group="control"):
    w = np.asarray(weights, dtype=float)
    d = np.asarray(deltas, dtype=float)
    return Contrast(feature, group, pathway, 0.0, 1.0, float(w @ d), bin_deltas=tuple(d),
                    bin_weights=tuple(w), bin_q1=tuple(np.zeros(d.size)), bin_q3=tuple(np.ones(d.size)))


class TestSlopeRatio:
    def test_plain_ratio(self):
        c = Contrast("length", "control", "ert", 3, 6, 50.0)
        d = Contrast("length", "dyslexic", "ert", 3, 6, -75.0)
        assert slope_ratio(d, c).sr == pytest.approx(1.5)

    def test_zero_control_delta(self):
        c = Contrast("length", "control", "ert", 3, 6, 0.0)
        d = Contrast("length", "dyslexic", "ert", 3, 6, 5.0)
        with pytest.raises(UndefinedRatioError):
            slope_ratio(d, c)

    def test_binwise_weighted_mean_of_ratios(self):
        w = [0.2, 0.3, 0.5]
        c = _contrast([-1.0, -2.0, -4.0], w)
        d = _contrast([-2.0, -2.0, -2.0], w, group="dyslexic")
        sr = slope_ratio(d, c)
        assert sr.sr == pytest.approx(0.2 * 2 + 0.3 * 1 + 0.5 * 0.5)
        assert sr.ratio_of_deltas == pytest.approx(abs(d.delta) / abs(c.delta))

    def test_zero_bin_dropped_and_renormalized(self):
        w = [0.25, 0.25, 0.5]
        c = _contrast([0.0, -2.0, -4.0], w)
        d = _contrast([-1.0, -4.0, -4.0], w, group="dyslexic")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            sr = slope_ratio(d, c)
        assert any("dropped" in str(x.message) for x in caught)
        assert sr.sr == pytest.approx((0.25 * 2 + 0.5 * 1) / 0.75)

    def test_mismatched_features(self):
        with pytest.raises(ValidationError):
            slope_ratio(Contrast("zipf", "d", "ert", 0, 1, 1.0), Contrast("length", "c", "ert", 0, 1, 1.0))


class TestContrasts:
    def test_zipf_requires_bins(self, small_bundle, small_context):
        stats, _ = small_context
        with pytest.raises(ValidationError):
            q1q3_contrast(small_bundle.models["control"], "zipf", stats, "control")

    def test_zipf_weighted_bins_sum_to_delta(self, small_bundle, small_context):
        stats, bins = small_context
        for g in GROUPS:
            c = feature_contrasts(small_bundle.models[g], stats, bins, g)["zipf"]
            for pw, con in c.items():
                total = float(np.dot(con.bin_weights, con.bin_deltas))
                assert abs(total - con.delta) <= 1e-9
                np.testing.assert_allclose(con.bin_weights, bins.weights)

    def test_signs_on_paper_shaped_data(self, small_bundle, small_context):
        stats, bins = small_context
        for g in GROUPS:
            c = feature_contrasts(small_bundle.models[g], stats, bins, g)
            assert c["length"]["ert"].delta > 0
            assert c["zipf"]["ert"].delta < 0
            assert c["surprisal"]["ert"].delta > 0

    def test_ert_pathway_is_product(self, small_bundle, small_context):
        stats, _ = small_context
        c = q1q3_contrast(small_bundle.models["control"], "length", stats, "control")
        for attr in ("value_q1", "value_q3"):
            p = getattr(c["skip"], attr)
            t = getattr(c["duration"], attr)
            assert getattr(c["ert"], attr) == pytest.approx((1 - p) * t)


class TestGapDecomposition:
    def test_subject_balanced_mean(self):
        v = np.array([1.0, 1.0, 1.0, 10.0])
        s = np.array(["a", "a", "a", "b"])
        assert subject_balanced_mean(v, s) == pytest.approx(5.5)

    def test_clamp_is_idempotent(self, small_table, small_context):
        stats, bins = small_context
        once = clamp_equal_ease(small_table.frame, stats, bins)
        twice = clamp_equal_ease(once, stats, bins)
        pd.testing.assert_frame_equal(once, twice)
        assert (once["length"] == stats.q1["length"]).all()

    def test_reduction_and_shapley_exact(self, small_bundle, small_table, small_context):
        stats, bins = small_context
        dec = decompose(small_bundle.models, small_table, stats, bins)
        assert dec.reduction == dec.g0 - dec.g_cf
        assert dec.skip_contrib + dec.dur_contrib == pytest.approx(dec.common_gap, rel=1e-13, abs=1e-12)
        g_cf, red = equal_ease(small_bundle.models, small_table, stats, bins)
        assert g_cf == dec.g_cf and red == dec.reduction

    def test_common_corpus_gap_equals_dd_minus_cc(self, small_bundle, small_table):
        sh = pathway_shapley(small_bundle.models, small_table)
        assert sh.skip + sh.duration == pytest.approx(sh.total, abs=1e-12)
        assert sum(sh.order_a) == pytest.approx(sh.total, abs=1e-12)
        assert sum(sh.order_b) == pytest.approx(sh.total, abs=1e-12)

    def test_control_corpus_option(self, small_bundle, small_table):
        sh = pathway_shapley(small_bundle.models, small_table, corpus="control")
        assert sh.corpus == "control"
        with pytest.raises(ValidationError):
            pathway_shapley(small_bundle.models, small_table, corpus="other")

    def test_identical_models_give_zero_gap(self, small_bundle, small_table, small_context):
        stats, bins = small_context
        same = {g: small_bundle.models["control"] for g in GROUPS}
        sh = pathway_shapley(same, small_table)
        assert sh.skip == 0.0 and sh.duration == 0.0
        # group means still differ through each group's own tokens; the common corpus removes that
        assert math.isfinite(baseline_gap(same, small_table))

    def test_attribution_normalized_and_shapley_sum_to_joint(self, small_bundle, small_table, small_context):
        stats, bins = small_context
        ca = attribute_features(small_bundle.models, small_table, stats, bins)
        joint = ca.joint_reduction
        assert abs(sum(ca.normalized.values()) - joint) <= 1e-9 * abs(joint)
        assert abs(sum(ca.shapley.values()) - joint) <= 1e-9 * abs(joint)

    def test_configurations(self):
        configs = interaction_configurations()
        assert len(configs) == 8
        assert configs[0] == ()
        assert len(set(configs)) == 8

    def test_failed_configuration_excluded(self, small_bundle, small_table, small_context):
        from ertgap.errors import NumericalError

        stats, bins = small_context

        def fitter(t, c, inter):
            raise NumericalError("no convergence")

        with pytest.warns(UserWarning, match="excluded"):
            fa = feature_attribution(small_table, stats, bins, ModelConfig(), configurations=[(), (FEATURES[:2],)],
                                     fitter=fitter, fitted={(): small_bundle.models})
        assert fa.failed == ("lengthxzipf",)
        assert len(fa.configs) == 1
