import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ertgap.corpus import (
    LengthBins,
    PooledStats,
    TokenTable,
    ingest_tokens,
    length_bin_edges,
    make_length_bins,
    orientation_check,
    pooled_stats,
    quantile,
    trim_outliers,
    trim_threshold,
    write_tokens,
)
from ertgap.errors import EmptyInputError, OrientationError, ParseError, ValidationError

from conftest import token_frame


def brute_type7(values, q):
    """Hyndman-Fan type 7 written out from the order statistics."""
    x = sorted(values)
    n = len(x)
    h = (n - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


class TestQuantile:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            vals = rng.normal(size=n).round(2)
            q = float(rng.uniform())
            assert quantile(vals, q) == pytest.approx(brute_type7(vals, q), abs=1e-12)

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50),
           st.floats(0, 1), st.floats(0, 1))
    def test_monotone_in_q(self, vals, a, b):
        lo, hi = sorted((a, b))
        assert quantile(vals, lo) <= quantile(vals, hi) + 1e-9


class TestIngest:
    def _write(self, tmp_path, frame, name="tokens.tsv"):
        table = TokenTable.from_frame(frame)
        path = tmp_path / name
        write_tokens(table, path)
        return table, path

    def test_round_trip(self, tmp_path):
        table, path = self._write(tmp_path, token_frame())
        back = ingest_tokens(path)
        pd.testing.assert_frame_equal(back.frame, table.frame)
        assert back.rosters == table.rosters

    def test_missing_column(self, tmp_path):
        path = tmp_path / "t.tsv"
        path.write_text("subject_id\tgroup\n1\tcontrol\n")
        with pytest.raises(ParseError):
            ingest_tokens(path)

    def _mutate(self, tmp_path, column, value, row=0):
        _, path = self._write(tmp_path, token_frame())
        df = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
        df.loc[row, column] = value
        df.to_csv(path, sep="\t", index=False)
        return path

    def test_bad_skip_flag(self, tmp_path):
        with pytest.raises(ParseError):
            ingest_tokens(self._mutate(tmp_path, "skip", "2"))

    def test_unknown_group(self, tmp_path):
        with pytest.raises(ValidationError):
            ingest_tokens(self._mutate(tmp_path, "group", "other"))

    def test_length_mismatch(self, tmp_path):
        with pytest.raises(ValidationError):
            ingest_tokens(self._mutate(tmp_path, "length", "99"))

    def test_skipped_token_with_trt(self, tmp_path):
        frame = token_frame()
        row = int(np.flatnonzero(frame["skip"] == 1)[0])
        with pytest.raises(ValidationError):
            ingest_tokens(self._mutate(tmp_path, "trt_ms", "200", row))

    def test_missing_zipf_kept_then_dropped(self, tmp_path):
        path = self._mutate(tmp_path, "zipf", "")
        table = ingest_tokens(path)
        assert table.frame["zipf"].isna().sum() == 1
        assert len(table.complete()) == len(table) - 1

    def test_empty_file(self, tmp_path):
        _, path = self._write(tmp_path, token_frame())
        path.write_text(path.read_text().splitlines()[0] + "\n")
        with pytest.raises(EmptyInputError):
            ingest_tokens(path)


class TestTrim:
    def test_pooled_threshold_uses_sample_sd(self):
        table = TokenTable.from_frame(token_frame(50))
        trt = table.fixated()["trt_ms"].to_numpy()
        thr = trim_threshold(table)
        expected = trt.mean() + 3 * trt.std(ddof=1)
        assert thr["control"] == pytest.approx(expected)
        assert thr["control"] == thr["dyslexic"]

    def test_four_point_example_keeps_large_value(self):
        # mean 1482.5 and sample SD 2345.0 put the cut near 8518 ms, so 5000 stays
        frame = token_frame(4, subjects=("c1", "d1"))
        frame["skip"] = 0
        frame["trt_ms"] = [300.0, 310.0, 320.0, 5000.0] * 2
        out, rep = trim_outliers(TokenTable.from_frame(frame), rule="per_group")
        assert rep.removed == 0
        assert rep.thresholds["control"] == pytest.approx(1482.5 + 3 * np.std([300, 310, 320, 5000], ddof=1))

    def test_removes_only_fixated_outliers(self):
        frame = token_frame(200, seed=1)
        frame.loc[0, ["skip", "trt_ms"]] = [0, 50_000.0]
        table = TokenTable.from_frame(frame)
        out, rep = trim_outliers(table)
        assert rep.removed == 1
        assert out.frame["trt_ms"].max() < 50_000
        assert (out.frame["skip"] == 1).sum() == (table.frame["skip"] == 1).sum()

    def test_idempotent_with_frozen_threshold(self):
        frame = token_frame(200, seed=2)
        frame.loc[3, ["skip", "trt_ms"]] = [0, 9_000.0]
        table = TokenTable.from_frame(frame)
        once, rep = trim_outliers(table)
        twice, rep2 = trim_outliers(once, threshold=rep.thresholds)
        pd.testing.assert_frame_equal(once.frame, twice.frame)
        assert rep2.removed == 0

    def test_per_group_rule(self):
        table = TokenTable.from_frame(token_frame(100))
        thr = trim_threshold(table, rule="per_group")
        assert set(thr) == {"control", "dyslexic"}

    def test_no_fixations(self):
        frame = token_frame()
        frame["skip"] = 1
        frame["trt_ms"] = np.nan
        with pytest.raises(EmptyInputError):
            trim_outliers(TokenTable.from_frame(frame))


class TestPooledStats:
    def test_quartiles_and_means(self):
        table = TokenTable.from_frame(token_frame(100))
        stats = pooled_stats(table)
        for f in ("length", "zipf", "surprisal"):
            vals = table.frame[f].to_numpy()
            assert stats.q1[f] == pytest.approx(brute_type7(vals, 0.25))
            assert stats.q3[f] == pytest.approx(brute_type7(vals, 0.75))
        ctrl = table.group_frame("control")
        assert stats.means["control"]["length"] == pytest.approx(ctrl["length"].mean())

    def test_record_round_trip(self):
        stats = pooled_stats(TokenTable.from_frame(token_frame(100)))
        assert PooledStats.from_record(stats.as_record()) == stats

    def test_orientation_ok(self):
        lines = orientation_check(pooled_stats(TokenTable.from_frame(token_frame(100))))
        assert len(lines) == 3 and all(line.endswith("OK") for line in lines)

    def test_orientation_inverted(self):
        stats = pooled_stats(TokenTable.from_frame(token_frame(100)))
        bad = PooledStats(q1={**stats.q1, "zipf": 6.0}, q3={**stats.q3, "zipf": 3.0}, means=stats.means,
                          trt_mean=stats.trt_mean, trt_sd=stats.trt_sd)
        with pytest.raises(OrientationError):
            orientation_check(bad)


class TestLengthBins:
    def test_weights_and_counts(self):
        table = TokenTable.from_frame(token_frame(300))
        bins = make_length_bins(table, 7)
        assert sum(bins.weights) == pytest.approx(1.0)
        assert sum(bins.counts) == len(table)
        assert all(c > 0 for c in bins.counts)
        idx = bins.assign(table.frame["length"].to_numpy())
        np.testing.assert_array_equal(np.bincount(idx, minlength=bins.k), bins.counts)

    def test_record_round_trip(self):
        bins = make_length_bins(TokenTable.from_frame(token_frame(300)), 7)
        assert LengthBins.from_record(bins.as_record()) == bins

    def test_constant_length_rejected(self):
        with pytest.raises(ValidationError):
            length_bin_edges(np.full(50, 4.0))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 15), min_size=10, max_size=300), st.integers(2, 9))
    def test_no_empty_bins_on_integer_data(self, lengths, k):
        x = np.asarray(lengths, dtype=float)
        if np.unique(x).size < 2:
            return
        edges = length_bin_edges(x, k)
        idx = np.searchsorted(edges[1:-1], x, side="left")
        counts = np.bincount(idx, minlength=edges.size - 1)
        assert counts.min() > 0
        assert edges.size - 1 <= k
