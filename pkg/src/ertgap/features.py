"""Lexical features: Zipf frequency lexicon and subword surprisal alignment."""

from __future__ import annotations

import bisect
import csv
import logging
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import AlignmentError, ParseError, ValidationError

logger = logging.getLogger(__name__)

MAX_TYPES = 1_500_000
MIN_COUNT = 2
LN2 = math.log(2.0)


def is_punctuation_only(word: str) -> bool:
    """True when every character is Unicode punctuation (P*) or symbol (S*)."""
    return bool(word) and all(unicodedata.category(ch)[0] in "PS" for ch in word)


def _key(word: str) -> str:
    return unicodedata.normalize("NFC", word).lower()


@dataclass(frozen=True)
class FrequencyLexicon:
    counts: Mapping[str, int]
    total_tokens: int

    @property
    def retained_types(self) -> int:
        return len(self.counts)

    def count(self, word: str) -> int | None:
        return self.counts.get(_key(word))


def read_frequency_list(path: str | Path) -> Counter:
    """Parse ``rank<TAB>word<TAB>count`` or ``word<TAB>count`` lines."""
    counts: Counter = Counter()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) == 3:
                word, raw = parts[1], parts[2]
            elif len(parts) == 2:
                word, raw = parts
            else:
                raise ParseError(f"{path}: expected 2 or 3 tab-separated fields", line_no)
            try:
                n = int(raw.strip())
            except ValueError:
                raise ParseError(f"{path}: count {raw!r} is not an integer", line_no) from None
            if n < 0:
                raise ValidationError(f"{path} line {line_no}: negative count {n}")
            counts[_key(word)] += n
    return counts


def merge_counts(parts: Iterable[Mapping[str, int]]) -> Counter:
    merged: Counter = Counter()
    for part in parts:
        for w, n in part.items():
            merged[_key(w)] += n
    return merged


def lexicon_from_counts(
    counts: Mapping[str, int],
    max_types: int = MAX_TYPES,
    min_count: int = MIN_COUNT,
) -> FrequencyLexicon:
    """Filter merged counts into a lexicon.

    Keeps types with ``count >= min_count`` that are not punctuation-only,
    then the ``max_types`` most frequent ones (ties broken lexicographically).
    ``total_tokens`` is summed over the retained types.
    """
    kept = [
        (w, int(n)) for w, n in counts.items()
        if n >= min_count and w and not is_punctuation_only(w)
    ]
    kept.sort(key=lambda wn: (-wn[1], wn[0]))
    kept = kept[:max_types]
    total = sum(n for _, n in kept)
    return FrequencyLexicon(counts=dict(kept), total_tokens=total)


def build_lexicon(
    frequency_lists: Sequence[str | Path],
    max_types: int = MAX_TYPES,
    min_count: int = MIN_COUNT,
) -> FrequencyLexicon:
    if not frequency_lists:
        raise ValidationError("no frequency lists given")
    merged = merge_counts(read_frequency_list(p) for p in frequency_lists)
    lex = lexicon_from_counts(merged, max_types=max_types, min_count=min_count)
    logger.info("lexicon: %d types, %d tokens", lex.retained_types, lex.total_tokens)
    return lex


def zipf(word: str, lexicon: FrequencyLexicon) -> float | None:
    """``log10(count per million) + 3``; ``None`` for words not in the lexicon."""
    n = lexicon.count(word)
    if n is None or n <= 0:
        return None
    return math.log10(n / (lexicon.total_tokens / 1e6)) + 3.0


def write_lexicon(lexicon: FrequencyLexicon, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# total_tokens\t{lexicon.total_tokens}\n")
        for w, n in sorted(lexicon.counts.items(), key=lambda wn: (-wn[1], wn[0])):
            fh.write(f"{w}\t{n}\n")


def read_lexicon(path: str | Path) -> FrequencyLexicon:
    counts: dict[str, int] = {}
    total = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("# total_tokens\t"):
                total = int(line.split("\t")[1])
                continue
            if not line:
                continue
            w, n = line.split("\t")
            counts[w] = int(n)
    if total is None:
        total = sum(counts.values())
    return FrequencyLexicon(counts=counts, total_tokens=total)


@dataclass(frozen=True)
class SubtokenScore:
    char_start: int
    char_end: int
    nll_nats: float

    def __post_init__(self):
        if not self.char_start < self.char_end:
            raise ValidationError(f"empty subtoken span [{self.char_start}, {self.char_end})")
        if not self.nll_nats >= 0:
            raise ValidationError(f"negative nll {self.nll_nats}")


@dataclass(frozen=True)
class AlignmentResult:
    surprisal_bits: list[float]
    n_aligned: int
    n_unaligned: int
    nll_aligned: float


def align_surprisal(
    words: Sequence[tuple[int, int]],
    scores: Sequence[SubtokenScore],
) -> AlignmentResult:
    """Sum subtoken NLLs inside each word span and convert nats to bits.

    ``words`` are ordered, non-overlapping ``(char_start, char_end)`` spans.
    A subtoken that overlaps a word without lying inside it raises
    :class:`AlignmentError`; subtokens between words (whitespace) are left
    unaligned and counted.  Every word needs at least one subtoken.
    """
    starts = [s for s, _ in words]
    for i in range(1, len(words)):
        if words[i][0] < words[i - 1][1]:
            raise AlignmentError(f"word spans {words[i - 1]} and {words[i]} overlap or are unordered")
    totals = [0.0] * len(words)
    hits = [0] * len(words)
    unaligned = 0
    aligned_nll = 0.0
    for sc in scores:
        # candidate: the last word starting at or before the subtoken start
        j = bisect.bisect_right(starts, sc.char_start) - 1
        inside = j >= 0 and sc.char_end <= words[j][1] and sc.char_start < words[j][1]
        if inside:
            totals[j] += sc.nll_nats
            hits[j] += 1
            aligned_nll += sc.nll_nats
            continue
        # overlap with any word means a boundary straddle
        k = bisect.bisect_left(starts, sc.char_end) - 1
        lo = max(j, 0)
        for m in range(lo, k + 1):
            ws, we = words[m]
            if sc.char_start < we and ws < sc.char_end:
                raise AlignmentError(
                    f"subtoken [{sc.char_start}, {sc.char_end}) straddles word [{ws}, {we})"
                )
        unaligned += 1
    for i, n in enumerate(hits):
        if n == 0:
            raise AlignmentError(f"word [{words[i][0]}, {words[i][1]}) has no subtokens")
    return AlignmentResult(
        surprisal_bits=[t / LN2 for t in totals],
        n_aligned=sum(hits),
        n_unaligned=unaligned,
        nll_aligned=aligned_nll,
    )


def read_word_spans(path: str | Path) -> dict[int, list[tuple[int, int, int]]]:
    """``doc_id, word_pos, char_start, char_end`` records grouped by document."""
    out: dict[int, list[tuple[int, int, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row_no, row in enumerate(reader, start=1):
            try:
                rec = (int(row["word_pos"]), int(row["char_start"]), int(row["char_end"]))
                doc = int(row["doc_id"])
            except (KeyError, TypeError, ValueError):
                raise ParseError(f"{path}: bad word-span record", row_no) from None
            out.setdefault(doc, []).append(rec)
    for doc in out:
        out[doc].sort(key=lambda r: r[1])
    return out


def read_subtoken_scores(path: str | Path) -> dict[int, list[SubtokenScore]]:
    """``doc_id, char_start, char_end, nll_nats`` records grouped by document."""
    out: dict[int, list[SubtokenScore]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for row_no, row in enumerate(reader, start=1):
            try:
                doc = int(row["doc_id"])
                sc = SubtokenScore(int(row["char_start"]), int(row["char_end"]), float(row["nll_nats"]))
            except (KeyError, TypeError, ValueError):
                raise ParseError(f"{path}: bad subtoken record", row_no) from None
            out.setdefault(doc, []).append(sc)
    return out


def align_documents(
    spans: Mapping[int, list[tuple[int, int, int]]],
    scores: Mapping[int, list[SubtokenScore]],
) -> list[tuple[int, int, float]]:
    """Align every document; returns ``(doc_id, word_pos, surprisal_bits)`` rows."""
    rows = []
    for doc in sorted(spans):
        recs = spans[doc]
        res = align_surprisal([(s, e) for _, s, e in recs], scores.get(doc, []))
        rows.extend((doc, pos, bits) for (pos, _, _), bits in zip(recs, res.surprisal_bits))
    return rows
