"""Subject-level bootstrap: percentile intervals and two-tailed p-values."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .corpus import GROUPS, TokenTable, quantile
from .errors import ErtgapError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

MIN_SAMPLES = 40
MAX_REDRAWS = 10
MAX_FAIL_FRACTION = 0.01


def percentile_ci(samples, level: float = 0.95) -> tuple[float, float]:
    """Equal-tailed percentile interval using the package quantile rule."""
    x = np.asarray(samples, dtype=float)
    if x.size < MIN_SAMPLES:
        raise ValidationError(f"percentile interval needs at least {MIN_SAMPLES} samples, got {x.size}")
    if not 0 < level < 1:
        raise ValidationError("level must be in (0, 1)")
    a = (1.0 - level) / 2.0
    lo, hi = quantile(x, [a, 1.0 - a])
    return float(lo), float(hi)


def bootstrap_p(samples, null_value: float) -> float:
    """``min(1, 2 (r + 1) / (B + 1))`` with ``r`` the smaller tail count at the null."""
    x = np.asarray(samples, dtype=float)
    b = x.size
    if b == 0:
        raise ValidationError("no bootstrap samples")
    r_min = min(int(np.sum(x <= null_value)), int(np.sum(x >= null_value)))
    return min(1.0, 2.0 * (r_min + 1) / (b + 1))


@dataclass(frozen=True)
class BootstrapResult:
    statistic: str
    estimate: float
    ci_low: float
    ci_high: float
    p: float
    b: int
    null_value: float
    seed: int
    trace_hash: str
    n_failed: int = 0

    def record(self) -> dict:
        return {
            "statistic": self.statistic,
            "estimate": self.estimate,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p": self.p,
            "b": self.b,
            "null_value": self.null_value,
            "seed": self.seed,
            "trace_hash": self.trace_hash,
            "n_failed": self.n_failed,
        }


def _subject_rows(table: TokenTable) -> dict[str, dict[str, np.ndarray]]:
    """Row positions of each subject, per group, in roster order."""
    frame = table.frame
    pos = pd.Series(np.arange(len(frame))).groupby(frame["subject_id"].to_numpy()).indices
    out = {}
    for g in GROUPS:
        roster = table.rosters.get(g, ())
        out[g] = {s: np.asarray(pos.get(s, np.empty(0, dtype=np.int64))) for s in roster}
    return out


def draw_subjects(table: TokenTable, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Per group, roster positions drawn with replacement (group sizes preserved)."""
    out = {}
    for g in GROUPS:
        n = len(table.rosters.get(g, ()))
        out[g] = rng.integers(0, n, size=n) if n else np.empty(0, dtype=np.int64)
    return out


def resample_table(
    table: TokenTable,
    draws: Mapping[str, np.ndarray],
    rows_by_subject: Mapping[str, Mapping[str, np.ndarray]] | None = None,
) -> TokenTable:
    """Assemble a resampled table; each drawn slot becomes a distinct subject.

    Slot ``k`` of group ``g`` is labelled ``"<original>#<k>"`` so repeated
    draws of one subject stay separate subjects. ``source_row`` points back
    into ``table.frame``.
    """
    rows_by_subject = _subject_rows(table) if rows_by_subject is None else rows_by_subject
    parts, labels, slots = [], [], []
    rosters = {}
    slot = 0
    for g in GROUPS:
        roster = table.rosters.get(g, ())
        names = []
        for k, j in enumerate(np.asarray(draws.get(g, ()), dtype=np.int64)):
            s = roster[j]
            rows = rows_by_subject[g][s]
            name = f"{s}#{k}"
            names.append(name)
            parts.append(rows)
            slots.append(np.full(rows.size, slot, dtype=np.int64))
            labels.append(name)
            slot += 1
        rosters[g] = tuple(sorted(names))
    rows = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    codes = np.concatenate(slots) if slots else np.empty(0, dtype=np.int64)
    frame = table.frame.iloc[rows].reset_index(drop=True)
    frame["subject_id"] = pd.Categorical.from_codes(codes, categories=labels).astype(str)
    base = table.frame["source_row"].to_numpy() if "source_row" in table.frame.columns else np.arange(len(table.frame))
    frame["source_row"] = base[rows]
    return TokenTable(frame, rosters)


def _trace_hash(draws_per_resample: Sequence[Mapping[str, np.ndarray]]) -> str:
    h = hashlib.sha256()
    for draws in draws_per_resample:
        for g in GROUPS:
            h.update(np.asarray(draws.get(g, ()), dtype=np.int64).tobytes())
            h.update(b"|")
        h.update(b";")
    return h.hexdigest()[:16]


StatFn = Callable[[TokenTable], Mapping[str, float]]


def _one_resample(stat: StatFn, table: TokenTable, rows_by_subject, seed: int, i: int,
                  require_finite: bool = True):
    """Run resample ``i``; redraw with sub-streams on failure. Returns (values, draws, failed)."""
    last_exc = None
    for attempt in range(MAX_REDRAWS + 1):
        rng = np.random.default_rng([seed, i, attempt])
        draws = draw_subjects(table, rng)
        try:
            values = stat(resample_table(table, draws, rows_by_subject))
        except (ErtgapError, FloatingPointError, ZeroDivisionError) as exc:
            last_exc = exc
            continue
        values = {k: float(v) for k, v in values.items()}
        if not require_finite or all(math.isfinite(v) for v in values.values()):
            return values, draws, False
        last_exc = NumericalError("non-finite statistic")
    logger.debug("resample %d failed after %d redraws: %s", i, MAX_REDRAWS, last_exc)
    return None, draws, True


def bootstrap_many(
    statistic: StatFn,
    table: TokenTable,
    b: int = 3000,
    seed: int = 0,
    null_values: Mapping[str, float] | None = None,
    estimate: Mapping[str, float] | None = None,
    n_jobs: int = 1,
    level: float = 0.95,
    return_samples: bool = False,
    require_finite: bool = True,
):
    """Bootstrap several statistics that share one resample stream.

    ``statistic`` maps a (resampled) table to ``{id: value}``; it must be a
    deterministic function of the table with any fitted models frozen.
    Resample ``i`` draws from ``default_rng([seed, i, attempt])``, so the
    output does not depend on ``n_jobs``.

    With ``require_finite=False`` a resample only fails when the statistic
    raises; a statistic that is undefined (NaN) on some resamples is then
    summarized over the resamples where it is defined, and if more than 1%
    of them are undefined its interval and p-value are NaN.
    """
    if b < MIN_SAMPLES:
        raise ValidationError(f"b must be at least {MIN_SAMPLES}")
    null_values = dict(null_values or {})
    point = dict(estimate) if estimate is not None else {k: float(v) for k, v in statistic(table).items()}
    rows_by_subject = _subject_rows(table)

    def job(i):
        return _one_resample(statistic, table, rows_by_subject, seed, i, require_finite)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(job, range(b)))
    else:
        results = [job(i) for i in range(b)]

    failed = sum(1 for r in results if r[2])
    if failed > MAX_FAIL_FRACTION * b:
        raise NumericalError(f"{failed} of {b} resamples failed (limit {MAX_FAIL_FRACTION:.0%})")
    if failed:
        logger.warning("%d of %d resamples failed and were dropped", failed, b)
    trace = _trace_hash([r[1] for r in results])
    samples = {k: np.array([r[0][k] for r in results if not r[2]]) for k in point}
    out = {}
    for k, est in point.items():
        s = samples[k]
        finite = s[np.isfinite(s)]
        undefined = s.size - finite.size
        nv = float(null_values.get(k, 0.0))
        if undefined > MAX_FAIL_FRACTION * b or finite.size < MIN_SAMPLES:
            logger.warning("%s undefined on %d of %d resamples; no interval", k, undefined, s.size)
            lo = hi = p = math.nan
        else:
            lo, hi = percentile_ci(finite, level)
            p = bootstrap_p(finite, nv)
        out[k] = BootstrapResult(
            statistic=k,
            estimate=float(est),
            ci_low=lo,
            ci_high=hi,
            p=p,
            b=int(finite.size),
            null_value=nv,
            seed=seed,
            trace_hash=trace,
            n_failed=failed + undefined,
        )
    if return_samples:
        return out, samples
    return out


def bootstrap(
    statistic: Callable[[TokenTable], float],
    table: TokenTable,
    b: int = 3000,
    seed: int = 0,
    null_value: float = 0.0,
    statistic_id: str = "statistic",
    n_jobs: int = 1,
) -> BootstrapResult:
    """Single-statistic form of :func:`bootstrap_many`."""
    res = bootstrap_many(
        lambda t: {statistic_id: statistic(t)},
        table,
        b=b,
        seed=seed,
        null_values={statistic_id: null_value},
        n_jobs=n_jobs,
    )
    return res[statistic_id]
