import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ertgap.errors import AlignmentError, ParseError, ValidationError
from ertgap.features import (
    SubtokenScore,
    align_documents,
    align_surprisal,
    build_lexicon,
    is_punctuation_only,
    lexicon_from_counts,
    merge_counts,
    read_frequency_list,
    read_lexicon,
    write_lexicon,
    zipf,
)


class TestLexicon:
    def test_merge_and_case_fold(self, tmp_path):
        a = tmp_path / "a.tsv"
        b = tmp_path / "b.tsv"
        a.write_text("1\tHund\t10\n2\tkat\t4\n")
        b.write_text("hund\t5\n")
        lex = build_lexicon([a, b], min_count=1)
        assert lex.count("HUND") == 15
        assert lex.total_tokens == 19

    def test_min_count_filters_before_total(self):
        lex = lexicon_from_counts(merge_counts([{"a": 5, "b": 1}]), min_count=2)
        assert lex.count("b") is None
        assert lex.total_tokens == 5

    def test_punctuation_dropped(self):
        assert is_punctuation_only("...")
        assert not is_punctuation_only("a.")
        lex = lexicon_from_counts({"a": 5, ",": 50}, min_count=1)
        assert lex.count(",") is None

    def test_zipf_formula(self):
        lex = lexicon_from_counts({"a": 1000, "b": 999_000}, min_count=1)
        assert zipf("a", lex) == pytest.approx(math.log10(1000 / 1.0) + 3.0)
        assert zipf("missing", lex) is None

    def test_round_trip(self, tmp_path):
        lex = lexicon_from_counts({"a": 7, "b": 3, "c": 3}, min_count=1)
        path = tmp_path / "lex.tsv"
        write_lexicon(lex, path)
        back = read_lexicon(path)
        assert dict(back.counts) == dict(lex.counts)
        assert back.total_tokens == lex.total_tokens

    def test_bad_count(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("a\tten\n")
        with pytest.raises(ParseError):
            read_frequency_list(p)

    def test_no_lists(self):
        with pytest.raises(ValidationError):
            build_lexicon([])


class TestAlignment:
    def test_sums_and_converts_to_bits(self):
        words = [(0, 3), (4, 9)]
        scores = [SubtokenScore(0, 3, 1.0), SubtokenScore(3, 4, 0.5),
                  SubtokenScore(4, 6, 2.0), SubtokenScore(6, 9, 1.0)]
        res = align_surprisal(words, scores)
        np.testing.assert_allclose(res.surprisal_bits, [1.0 / math.log(2), 3.0 / math.log(2)])
        assert res.n_unaligned == 1
        assert res.nll_aligned == pytest.approx(4.0)

    def test_straddle_raises(self):
        with pytest.raises(AlignmentError):
            align_surprisal([(0, 3), (4, 8)], [SubtokenScore(0, 5, 1.0), SubtokenScore(5, 8, 1.0)])

    def test_word_without_subtokens(self):
        with pytest.raises(AlignmentError):
            align_surprisal([(0, 3), (4, 8)], [SubtokenScore(0, 3, 1.0)])

    def test_negative_nll(self):
        with pytest.raises(ValidationError):
            SubtokenScore(0, 1, -0.1)

    def test_documents(self):
        spans = {2: [(0, 0, 2)], 1: [(0, 0, 1), (1, 2, 3)]}
        scores = {1: [SubtokenScore(0, 1, math.log(2)), SubtokenScore(2, 3, 2 * math.log(2))],
                  2: [SubtokenScore(0, 2, 0.0)]}
        rows = align_documents(spans, scores)
        assert [(d, p) for d, p, _ in rows] == [(1, 0), (1, 1), (2, 0)]
        np.testing.assert_allclose([b for *_, b in rows], [1.0, 2.0, 0.0])

    @given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 3),
                              st.lists(st.floats(0, 10), min_size=1, max_size=4)),
                    min_size=1, max_size=15))
    def test_total_information_preserved(self, layout):
        """Bits summed over words equal aligned nats / ln 2 for any tokenization inside words."""
        words, scores, pos = [], [], 0
        for length, gap, parts in layout:
            parts = parts[:length]
            start, end = pos, pos + length
            words.append((start, end))
            cuts = np.linspace(start, end, len(parts) + 1).round().astype(int)
            cuts = np.unique(cuts)
            for a, b, v in zip(cuts[:-1], cuts[1:], parts):
                scores.append(SubtokenScore(int(a), int(b), float(v)))
            pos = end + gap
        res = align_surprisal(words, scores)
        assert sum(res.surprisal_bits) == pytest.approx(res.nll_aligned / math.log(2), rel=1e-12, abs=1e-12)
