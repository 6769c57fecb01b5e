"""Token tables: ingest, validation, outlier trimming, pooled statistics and length bins."""

from __future__ import annotations

import csv
import logging
import math
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyInputError, OrientationError, ParseError, ValidationError

logger = logging.getLogger(__name__)

GROUPS = ("control", "dyslexic")
FEATURES = ("length", "zipf", "surprisal")

TOKEN_COLUMNS = (
    "subject_id",
    "group",
    "doc_id",
    "sentence_id",
    "word_pos",
    "word",
    "skip",
    "trt_ms",
    "length",
    "zipf",
    "surprisal_bits",
)

# internal frame column order; "surprisal" is the in-memory name of surprisal_bits
_FRAME_COLUMNS = [
    "subject_id",
    "group",
    "doc_id",
    "sentence_id",
    "word_pos",
    "word",
    "skip",
    "trt_ms",
    "length",
    "zipf",
    "surprisal",
]


def quantile(values: np.ndarray | Sequence[float], q: float | Sequence[float]) -> np.ndarray | float:
    """Linear-interpolation ("type 7") quantile used everywhere in the package."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise EmptyInputError("quantile of an empty sample")
    return np.quantile(arr, q, method="linear")


def normalize_word(word: str) -> str:
    return unicodedata.normalize("NFC", word)


def word_length(word: str) -> int:
    return len(normalize_word(word))


@dataclass(frozen=True)
class TokenTable:
    """Immutable collection of word events.

    ``frame`` holds one row per token with the columns in ``_FRAME_COLUMNS``
    (plus ``source_row`` when the table is a bootstrap resample).  Treat it as
    read-only; every transformation returns a new table.
    """

    frame: pd.DataFrame
    rosters: Mapping[str, tuple[str, ...]]

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def subjects(self) -> tuple[str, ...]:
        return tuple(s for g in GROUPS for s in self.rosters.get(g, ()))

    def group_frame(self, group: str) -> pd.DataFrame:
        return self.frame[self.frame["group"] == group]

    def fixated(self) -> pd.DataFrame:
        return self.frame[self.frame["skip"] == 0]

    def complete(self) -> "TokenTable":
        """Tokens with every feature present (the modelling sample)."""
        mask = self.frame[list(FEATURES)].notna().all(axis=1)
        if mask.all():
            return self
        return self.with_frame(self.frame[mask])

    def with_frame(self, frame: pd.DataFrame) -> "TokenTable":
        return TokenTable(frame.reset_index(drop=True), self.rosters)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, validate: bool = True) -> "TokenTable":
        frame = frame.copy()
        if "surprisal_bits" in frame.columns and "surprisal" not in frame.columns:
            frame = frame.rename(columns={"surprisal_bits": "surprisal"})
        missing = [c for c in _FRAME_COLUMNS if c not in frame.columns]
        if missing:
            raise ValidationError(f"token frame lacks columns {missing}")
        extra = [c for c in frame.columns if c not in _FRAME_COLUMNS and c != "source_row"]
        frame = frame.drop(columns=extra)
        frame["subject_id"] = frame["subject_id"].astype(str)
        frame["group"] = frame["group"].astype(str)
        for col in ("doc_id", "sentence_id", "word_pos", "length"):
            frame[col] = frame[col].astype(np.int64)
        frame["skip"] = frame["skip"].astype(np.int8)
        for col in ("trt_ms", "zipf", "surprisal"):
            frame[col] = frame[col].astype(float)
        if validate:
            _validate_frame(frame)
        frame = frame.sort_values(
            ["subject_id", "doc_id", "sentence_id", "word_pos"], kind="mergesort"
        ).reset_index(drop=True)
        rosters = {
            g: tuple(sorted(frame.loc[frame["group"] == g, "subject_id"].unique()))
            for g in GROUPS
        }
        return cls(frame, rosters)


def _validate_frame(frame: pd.DataFrame) -> None:
    bad_group = ~frame["group"].isin(GROUPS)
    if bad_group.any():
        i = int(np.flatnonzero(bad_group.to_numpy())[0])
        raise ValidationError(f"row {i}: unknown group label {frame['group'].iloc[i]!r}")
    per_subject = frame.groupby("subject_id")["group"].nunique()
    if (per_subject > 1).any():
        raise ValidationError(
            f"subjects in more than one group: {sorted(per_subject[per_subject > 1].index)[:5]}"
        )
    skip = frame["skip"].to_numpy()
    trt = frame["trt_ms"].to_numpy()
    if not np.isin(skip, (0, 1)).all():
        raise ValidationError("skip must be 0 or 1")
    bad = (skip == 1) & ~np.isnan(trt)
    if bad.any():
        raise ValidationError(f"row {int(np.flatnonzero(bad)[0])}: skipped token carries trt_ms")
    bad = (skip == 0) & ~(trt > 0)
    if bad.any():
        raise ValidationError(f"row {int(np.flatnonzero(bad)[0])}: fixated token needs trt_ms > 0")
    if (frame["length"].to_numpy() < 1).any():
        raise ValidationError("length must be >= 1")
    zipf = frame["zipf"].to_numpy()
    bad = ~np.isnan(zipf) & ((zipf < 0) | (zipf > 8))
    if bad.any():
        raise ValidationError(f"row {int(np.flatnonzero(bad)[0])}: zipf outside [0, 8]")
    surp = frame["surprisal"].to_numpy()
    bad = ~np.isnan(surp) & (surp < 0)
    if bad.any():
        raise ValidationError(f"row {int(np.flatnonzero(bad)[0])}: negative surprisal")


def _parse_optional_float(text: str, name: str, row: int) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("na", "nan"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{name}={text!r} is not a number", row) from None


def _parse_int(text: str, name: str, row: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"{name}={text!r} is not an integer", row) from None


def ingest_tokens(source: str | Path, delimiter: str | None = None) -> TokenTable:
    """Read and validate a delimited token file.

    Row numbers in diagnostics are 1-based data rows (the header is row 0).
    Tokens with a missing ``zipf`` are kept; :meth:`TokenTable.complete`
    drops them before modelling.
    """
    path = Path(source)
    with open(path, newline="", encoding="utf-8") as fh:
        sample = fh.readline()
        if delimiter is None:
            delimiter = "\t" if "\t" in sample else ","
        fh.seek(0)
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [c for c in TOKEN_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"header lacks required columns {missing}", 0)
        records = []
        for row_no, row in enumerate(reader, start=1):
            if None in row or any(row[c] is None for c in TOKEN_COLUMNS):
                raise ParseError("wrong number of fields", row_no)
            group = row["group"].strip()
            if group not in GROUPS:
                raise ValidationError(f"row {row_no}: unknown group label {group!r}")
            skip_text = row["skip"].strip()
            if skip_text not in ("0", "1"):
                raise ParseError(f"skip={skip_text!r} must be 0 or 1", row_no)
            skip = int(skip_text)
            trt = _parse_optional_float(row["trt_ms"], "trt_ms", row_no)
            if skip == 1 and not math.isnan(trt):
                raise ValidationError(f"row {row_no}: skip=1 but trt_ms={trt} present")
            if skip == 0 and not trt > 0:
                raise ValidationError(f"row {row_no}: fixated token needs trt_ms > 0")
            word = normalize_word(row["word"])
            length = _parse_int(row["length"], "length", row_no)
            if length != len(word):
                raise ValidationError(
                    f"row {row_no}: length={length} but {word!r} has {len(word)} characters"
                )
            zipf = _parse_optional_float(row["zipf"], "zipf", row_no)
            if not math.isnan(zipf) and not 0 <= zipf <= 8:
                raise ValidationError(f"row {row_no}: zipf={zipf} outside [0, 8]")
            surp = _parse_optional_float(row["surprisal_bits"], "surprisal_bits", row_no)
            if not math.isnan(surp) and surp < 0:
                raise ValidationError(f"row {row_no}: negative surprisal_bits")
            records.append(
                (
                    row["subject_id"].strip(),
                    group,
                    _parse_int(row["doc_id"], "doc_id", row_no),
                    _parse_int(row["sentence_id"], "sentence_id", row_no),
                    _parse_int(row["word_pos"], "word_pos", row_no),
                    word,
                    skip,
                    trt,
                    length,
                    zipf,
                    surp,
                )
            )
    if not records:
        raise EmptyInputError(f"{path} contains no tokens")
    frame = pd.DataFrame.from_records(records, columns=_FRAME_COLUMNS)
    table = TokenTable.from_frame(frame, validate=True)
    n_missing = int(table.frame["zipf"].isna().sum())
    if n_missing:
        logger.info("%d tokens (%.2f%%) lack zipf; excluded at model time",
                    n_missing, 100 * n_missing / len(table))
    return table


def write_tokens(table: TokenTable, path: str | Path) -> None:
    out = table.frame[_FRAME_COLUMNS].rename(columns={"surprisal": "surprisal_bits"})
    out = out[list(TOKEN_COLUMNS)]
    out.to_csv(path, sep="\t", index=False, na_rep="", float_format="%.17g")


@dataclass(frozen=True)
class TrimReport:
    thresholds: Mapping[str, float]
    mean: float
    sd: float
    n_fixated: int
    removed: int

    @property
    def threshold(self) -> float:
        """The pooled threshold (the larger one under the per-group rule)."""
        return float(max(self.thresholds.values()))

    def as_record(self) -> dict:
        return {
            "thresholds_ms": dict(self.thresholds),
            "fixated_mean_ms": self.mean,
            "fixated_sd_ms": self.sd,
            "n_fixated": self.n_fixated,
            "removed": self.removed,
        }


def trim_threshold(table: TokenTable, n_sd: float = 3.0, rule: str = "pooled") -> dict[str, float]:
    """Per-group outlier thresholds ``mean + n_sd * SD`` over fixated TRTs.

    With ``rule="pooled"`` one threshold computed across both groups is
    returned under every group key.
    """
    fix = table.fixated()
    if len(fix) == 0:
        raise EmptyInputError("no fixated tokens to trim")
    if rule == "pooled":
        trt = fix["trt_ms"].to_numpy()
        sd = float(np.std(trt, ddof=1)) if trt.size > 1 else 0.0
        thr = float(trt.mean()) + n_sd * sd
        return {g: thr for g in GROUPS}
    if rule == "per_group":
        out = {}
        for g in GROUPS:
            trt = fix.loc[fix["group"] == g, "trt_ms"].to_numpy()
            if trt.size == 0:
                out[g] = math.inf
                continue
            sd = float(np.std(trt, ddof=1)) if trt.size > 1 else 0.0
            out[g] = float(trt.mean()) + n_sd * sd
        return out
    raise ValueError(f"unknown trim rule {rule!r}")


def trim_outliers(
    table: TokenTable,
    threshold: float | Mapping[str, float] | None = None,
    n_sd: float = 3.0,
    rule: str = "pooled",
) -> tuple[TokenTable, TrimReport]:
    """Drop fixated tokens whose TRT exceeds the mean + 3 SD threshold.

    Pass the ``threshold`` of an earlier report to reapply a frozen cut;
    trimming with a frozen threshold is idempotent.
    """
    if len(table) == 0:
        raise EmptyInputError("empty token table")
    fix = table.fixated()
    if len(fix) == 0:
        raise EmptyInputError("no fixated tokens to trim")
    if threshold is None:
        thresholds = trim_threshold(table, n_sd=n_sd, rule=rule)
    elif isinstance(threshold, Mapping):
        thresholds = dict(threshold)
    else:
        thresholds = {g: float(threshold) for g in GROUPS}
    frame = table.frame
    limit = frame["group"].map(thresholds).to_numpy(dtype=float)
    drop = (frame["skip"].to_numpy() == 0) & (frame["trt_ms"].to_numpy() > limit)
    trt = fix["trt_ms"].to_numpy()
    report = TrimReport(
        thresholds=thresholds,
        mean=float(trt.mean()),
        sd=float(np.std(trt, ddof=1)) if trt.size > 1 else 0.0,
        n_fixated=int(trt.size),
        removed=int(drop.sum()),
    )
    logger.info("trim: removed %d of %d fixated tokens above %.1f ms",
                report.removed, report.n_fixated, report.threshold)
    return table.with_frame(frame[~drop]), report


@dataclass(frozen=True)
class PooledStats:
    q1: Mapping[str, float]
    q3: Mapping[str, float]
    means: Mapping[str, Mapping[str, float]]
    trt_mean: float
    trt_sd: float
    skip_rate: Mapping[str, float] = field(default_factory=dict)
    n_tokens: Mapping[str, int] = field(default_factory=dict)

    def group_means(self, group: str) -> dict[str, float]:
        return dict(self.means[group])

    def as_record(self) -> dict:
        return {
            "q1": dict(self.q1),
            "q3": dict(self.q3),
            "means": {g: dict(m) for g, m in self.means.items()},
            "trt_mean": self.trt_mean,
            "trt_sd": self.trt_sd,
            "skip_rate": dict(self.skip_rate),
            "n_tokens": dict(self.n_tokens),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "PooledStats":
        return cls(
            q1=dict(rec["q1"]),
            q3=dict(rec["q3"]),
            means={g: dict(m) for g, m in rec["means"].items()},
            trt_mean=float(rec["trt_mean"]),
            trt_sd=float(rec["trt_sd"]),
            skip_rate=dict(rec.get("skip_rate", {})),
            n_tokens={k: int(v) for k, v in rec.get("n_tokens", {}).items()},
        )


def pooled_stats(table: TokenTable) -> PooledStats:
    """Pooled Q1/Q3 per feature, per-group feature means, pooled fixated TRT moments."""
    frame = table.frame
    q1, q3 = {}, {}
    for f in FEATURES:
        vals = frame[f].to_numpy(dtype=float)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            raise ValidationError(f"feature {f!r} is missing on every token")
        if vals.size < 2:
            raise ValidationError(f"feature {f!r} is present on fewer than 2 tokens")
        lo, hi = quantile(vals, [0.25, 0.75])
        q1[f], q3[f] = float(lo), float(hi)
    means: dict[str, dict[str, float]] = {}
    skip_rate, n_tokens = {}, {}
    for g in GROUPS:
        gf = frame[frame["group"] == g]
        n_tokens[g] = int(len(gf))
        if len(gf) == 0:
            continue
        means[g] = {f: float(np.nanmean(gf[f].to_numpy(dtype=float))) for f in FEATURES}
        skip_rate[g] = float(gf["skip"].mean())
    trt = frame.loc[frame["skip"] == 0, "trt_ms"].to_numpy(dtype=float)
    return PooledStats(
        q1=q1,
        q3=q3,
        means=means,
        trt_mean=float(trt.mean()) if trt.size else math.nan,
        trt_sd=float(np.std(trt, ddof=1)) if trt.size > 1 else math.nan,
        skip_rate=skip_rate,
        n_tokens=n_tokens,
    )


_DIRECTIONS = {
    "length": ("shorter", "longer"),
    "zipf": ("rarer", "more frequent"),
    "surprisal": ("more predictable", "more surprising"),
}


def orientation_check(stats: PooledStats) -> list[str]:
    """Verify Q1 < Q3 for every feature; return one summary line per feature.

    Downstream sign conventions assume Q1 is the shorter / rarer / more
    predictable end, so an inversion is a hard error.
    """
    lines = []
    for f in FEATURES:
        lo, hi = stats.q1[f], stats.q3[f]
        if not lo < hi:
            raise OrientationError(
                f"{f}: expected Q1 < Q3 ({_DIRECTIONS[f][0]} -> {_DIRECTIONS[f][1]}), "
                f"got Q1={lo:g}, Q3={hi:g}"
            )
        a, b = _DIRECTIONS[f]
        lines.append(f"{f}: Q1={lo:g} -> Q3={hi:g} ({a} -> {b}) OK")
    return lines


@dataclass(frozen=True)
class LengthBins:
    """Equal-frequency pooled length bins.

    Bin ``j`` covers ``(edges[j], edges[j+1]]``; the first bin also takes
    everything at or below ``edges[0]`` and the last everything above
    ``edges[-1]``, so any length maps to exactly one bin.
    """

    edges: tuple[float, ...]
    weights: tuple[float, ...]
    counts: tuple[int, ...]
    mean_length: tuple[float, ...]
    zipf_q1: tuple[float, ...]
    zipf_q3: tuple[float, ...]

    @property
    def k(self) -> int:
        return len(self.weights)

    def assign(self, lengths: np.ndarray | Sequence[float]) -> np.ndarray:
        x = np.asarray(lengths, dtype=float)
        inner = np.asarray(self.edges[1:-1], dtype=float)
        return np.searchsorted(inner, x, side="left").astype(np.int64)

    def intervals(self) -> list[tuple[float, float]]:
        return [(self.edges[j], self.edges[j + 1]) for j in range(self.k)]

    def as_record(self) -> dict:
        return {
            "edges": list(self.edges),
            "weights": list(self.weights),
            "counts": list(self.counts),
            "mean_length": list(self.mean_length),
            "zipf_q1": list(self.zipf_q1),
            "zipf_q3": list(self.zipf_q3),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "LengthBins":
        return cls(**{k: tuple(rec[k]) for k in
                      ("edges", "weights", "counts", "mean_length", "zipf_q1", "zipf_q3")})


def length_bin_edges(lengths: np.ndarray, k: int = 7) -> np.ndarray:
    """Equal-frequency cut points with duplicates and empty bins merged away."""
    x = np.asarray(lengths, dtype=float)
    if np.unique(x).size < 2:
        raise ValidationError("length binning needs at least 2 distinct lengths")
    edges = np.unique(quantile(x, np.linspace(0.0, 1.0, k + 1)))
    # right-closed bins can still be empty on integer data (e.g. (3.2, 3.8]); merge them
    while True:
        inner = edges[1:-1]
        idx = np.searchsorted(inner, x, side="left")
        counts = np.bincount(idx, minlength=edges.size - 1)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return edges
        j = int(empty[0])
        # drop the upper edge of an empty bin (the lower one for the last bin)
        edges = np.delete(edges, j + 1 if j + 1 < edges.size - 1 else j)


def make_length_bins(table: TokenTable, k: int = 7) -> LengthBins:
    frame = table.frame
    if len(frame) == 0:
        raise EmptyInputError("empty token table")
    lengths = frame["length"].to_numpy(dtype=float)
    edges = length_bin_edges(lengths, k)
    proto = LengthBins(tuple(edges), (), (), (), (), ())
    idx = proto.assign(lengths)
    m = edges.size - 1
    counts = np.bincount(idx, minlength=m)
    weights = counts / counts.sum()
    zipf = frame["zipf"].to_numpy(dtype=float)
    mean_len, zq1, zq3 = [], [], []
    for j in range(m):
        sel = idx == j
        mean_len.append(float(lengths[sel].mean()))
        z = zipf[sel]
        z = z[~np.isnan(z)]
        if z.size:
            lo, hi = quantile(z, [0.25, 0.75])
            zq1.append(float(lo))
            zq3.append(float(hi))
        else:
            zq1.append(math.nan)
            zq3.append(math.nan)
    if m < k:
        logger.debug("length bins: %d requested, %d realized after merging ties", k, m)
    return LengthBins(
        edges=tuple(float(e) for e in edges),
        weights=tuple(float(w) for w in weights),
        counts=tuple(int(c) for c in counts),
        mean_length=tuple(mean_len),
        zipf_q1=tuple(zq1),
        zipf_q3=tuple(zq3),
    )


def subject_index(subject_ids: pd.Series | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes and the unique subject labels, in sorted order."""
    codes, uniques = pd.factorize(np.asarray(subject_ids), sort=True)
    return codes.astype(np.int64), np.asarray(uniques)
