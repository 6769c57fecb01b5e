import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ertgap import synth
from ertgap.config import RunConfig, dump_config, from_mapping, load_config
from ertgap.corpus import FEATURES, GROUPS
from ertgap.errors import ValidationError

TINY = dict(n_control=3, n_dyslexic=3, tokens_per_subject=400)


class TestGenerator:
    def test_seeded_determinism(self):
        cfg = synth.preset("paper_shaped", seed=5, **TINY)
        a, ta = synth.generate(cfg)
        b, tb = synth.generate(cfg)
        pd.testing.assert_frame_equal(a.frame, b.frame)
        assert ta.targets == tb.targets

    def test_marginals(self):
        raw, _ = synth.generate(synth.preset("paper_shaped", **TINY))
        f = raw.frame
        assert f["length"].between(1, 15).all()
        assert f["zipf"].between(2, 7).all()
        assert f["surprisal"].between(0, 20).all()
        assert f.loc[f["skip"] == 1, "trt_ms"].isna().all()
        assert (f.loc[f["skip"] == 0, "trt_ms"] > 0).all()
        r = np.corrcoef(f["length"], f["zipf"])[0, 1]
        assert r < -0.6

    def test_shared_text(self):
        raw, _ = synth.generate(synth.preset("paper_shaped", **TINY))
        f = raw.frame
        words = [g.sort_values(["doc_id", "sentence_id", "word_pos"])["word"].tolist()
                 for _, g in f.groupby("subject_id")]
        assert all(w == words[0] for w in words)

    def test_null_model_has_no_group_difference(self):
        # without trimming both groups read the same tokens, so covariate means agree too
        _, truth = synth.generate(synth.preset("null_model", trim_sd=None, **TINY))
        for f in FEATURES:
            assert truth.targets[f"sr/ert/{f}"] == pytest.approx(1.0, abs=1e-12)
        assert truth.targets["gap/skip"] == pytest.approx(0.0, abs=1e-9)
        assert truth.targets["gap/duration"] == pytest.approx(0.0, abs=1e-9)

    def test_inert_zipf_contributes_nothing(self):
        _, truth = synth.generate(synth.preset("inert_zipf", **TINY))
        for g in GROUPS:
            assert truth.targets[f"delta/ert/{g}/zipf"] == pytest.approx(0.0, abs=1e-9)
        assert truth.targets["attr/zipf"] == pytest.approx(0.0, abs=1e-9)

    def test_truth_pathway_split_exact(self):
        _, truth = synth.generate(synth.preset("paper_shaped", **TINY))
        t = truth.targets
        assert t["gap/skip"] + t["gap/duration"] == pytest.approx(t["gap/common"], abs=1e-9)
        assert t["gap/reduction"] == pytest.approx(t["gap/g0"] - t["gap/g_cf"], abs=1e-12)

    def test_zero_noise_retained_mean(self):
        truth = synth.preset("paper_shaped").control
        no_noise = synth.GroupTruth(truth.skip_intercept, truth.skip_terms, truth.trt_intercept,
                                    truth.trt_terms, sigma=0.0)
        cols = {"length": np.array([4.0]), "zipf": np.array([5.0]), "surprisal": np.array([6.0])}
        p, m = synth.retained(no_noise, cols, None)
        np.testing.assert_allclose(m, np.exp(no_noise.log_trt_mean(cols)))
        np.testing.assert_allclose(p, no_noise.p_skip(cols))

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.05, 1.0), st.floats(100, 3000))
    def test_truncation_lowers_retained_mean(self, sigma, threshold):
        base = synth.preset("paper_shaped").control
        t = synth.GroupTruth(base.skip_intercept, base.skip_terms, base.trt_intercept, base.trt_terms, sigma)
        cols = {"length": np.array([5.0]), "zipf": np.array([4.5]), "surprisal": np.array([8.0])}
        _, m_full = synth.retained(t, cols, None)
        p_cut, m_cut = synth.retained(t, cols, threshold)
        assert m_cut[0] <= m_full[0] + 1e-9
        assert m_cut[0] <= threshold
        assert 0 <= p_cut[0] <= 1

    def test_unknown_preset(self):
        with pytest.raises(ValidationError):
            synth.preset("nope")

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            synth.preset("paper_shaped", n_control=0)
        with pytest.raises(ValidationError):
            synth.Logistic(1.0, 0.0, 0.0)


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.n_splines == 20 and cfg.penalty_order == 2 and cfg.spline_degree == 3
        assert len(cfg.lambda_grid) == 9
        assert cfg.lambda_grid[0] == pytest.approx(1e-3) and cfg.lambda_grid[-1] == pytest.approx(1e5)
        assert cfg.bootstrap_b == 3000 and cfg.trim_sd == 3.0 and cfg.n_bins == 7
        assert (cfg.cv_k_stage1, cfg.cv_k_validate, cfg.cv_subsample) == (5, 10, 0.5)
        assert cfg.shapley_corpus == "common" and cfg.attribution_mode == "single"

    def test_unknown_key(self):
        with pytest.raises(ValidationError, match="unknown config keys"):
            from_mapping({"n_spline": 10})

    def test_bad_choice(self):
        with pytest.raises(ValidationError):
            from_mapping({"trim_rule": "sometimes"})
        with pytest.raises(ValidationError):
            from_mapping({"constraint_skip_zipf": "convex"})

    def test_yaml_round_trip(self, tmp_path):
        cfg = RunConfig().with_overrides(bootstrap_b=500, frequency_paths=["a.tsv", "b.tsv"])
        path = tmp_path / "c.yaml"
        path.write_text(dump_config(cfg))
        back = load_config(path)
        assert back == cfg
        assert back.hash == cfg.hash

    def test_nested_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("models:\n  n_splines: 10\n")
        with pytest.raises(ValidationError, match="flat"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(tmp_path / "absent.yaml")

    def test_hash_changes_with_values(self):
        assert RunConfig().hash != RunConfig(cv_seed=1).hash
        assert RunConfig().hash == RunConfig().hash

    def test_model_config(self):
        mc = RunConfig(constraint_duration_length="monotone_inc").model_config()
        assert mc.constraints["duration"]["length"] == "monotone_inc"
        assert mc.k_stage1 == 5

    def test_integer_coercion(self):
        assert from_mapping({"n_bins": 5.0}).n_bins == 5
        with pytest.raises(ValidationError):
            from_mapping({"n_bins": 5.5})
        with pytest.raises(ValidationError):
            from_mapping({"bootstrap_hold_fixed": "yes"})
