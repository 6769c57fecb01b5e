"""Every headline statistic as one function of a token table, with frozen models.

:class:`HeadlineStatistics` is the statistic handed to the bootstrap. It
caches each model's per-row term contributions on the base table, so a
resample (whose rows carry ``source_row``) only re-evaluates terms whose
feature values a counterfactual clamp changes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.special import expit

from .corpus import FEATURES, GROUPS, LengthBins, PooledStats, TokenTable, make_length_bins, pooled_stats
from .effects import PATHWAYS, ert, feature_contrasts, slope_ratio
from .errors import UndefinedRatioError, ValidationError
from .gam import FittedGAM
from .modeling import GroupModels

logger = logging.getLogger(__name__)


def statistic_ids() -> list[str]:
    ids = []
    for pw in PATHWAYS:
        for g in GROUPS:
            ids += [f"delta/{pw}/{g}/{f}" for f in FEATURES]
        ids += [f"sr/{pw}/{f}" for f in FEATURES]
    ids += ["gap/g0", "gap/g_cf", "gap/reduction", "gap/skip", "gap/duration", "gap/common"]
    ids += [f"attr/{f}" for f in FEATURES]
    return ids


def null_values() -> dict[str, float]:
    """1 for slope ratios, 0 for every difference."""
    return {k: (1.0 if k.startswith("sr/") else 0.0) for k in statistic_ids()}


class _TermCache:
    """Per-row contributions of one model's terms on the base rows."""

    def __init__(self, model: FittedGAM, frame: pd.DataFrame):
        self.model = model
        self.cols = {f: frame[f].to_numpy(dtype=float) for f in FEATURES}
        self.smooth = {s.spec.feature: s(self.cols[s.spec.feature]) for s in model.smooths}
        self.tensor = [t(self.cols[t.spec.features[0]], self.cols[t.spec.features[1]]) for t in model.tensors]

    def eta(self, rows: np.ndarray, clamp: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        """Linear predictor at base ``rows``; ``clamp`` gives replacement values per row."""
        clamp = clamp or {}
        out = np.full(rows.size, self.model.intercept)
        for s in self.model.smooths:
            f = s.spec.feature
            if f in clamp:
                vals, inv = np.unique(clamp[f], return_inverse=True)
                out += s(vals)[inv]
            else:
                out += self.smooth[f][rows]
        for t, cached in zip(self.model.tensors, self.tensor):
            fa, fb = t.spec.features
            if fa in clamp or fb in clamp:
                xa = clamp[fa] if fa in clamp else self.cols[fa][rows]
                xb = clamp[fb] if fb in clamp else self.cols[fb][rows]
                out += t(xa, xb)
            else:
                out += cached[rows]
        return out


class HeadlineStatistics:
    """Contrasts, slope ratios, gap pieces and feature attributions.

    Parameters
    ----------
    models : mapping
        Fitted :class:`GroupModels` per group; never refit.
    table : TokenTable
        Base table; rows without every feature are dropped.
    n_bins : int
        Requested number of pooled length bins.
    hold_fixed : bool
        Keep the base quartiles and length bins for every resample instead of
        rebuilding them (group means are always recomputed).
    corpus : str
        Evaluation corpus of the pathway split.
    """

    def __init__(
        self,
        models: Mapping[str, GroupModels],
        table: TokenTable,
        n_bins: int = 7,
        hold_fixed: bool = False,
        corpus: str = "common",
    ):
        base = table.complete()
        frame = base.frame
        if "source_row" in frame.columns:
            frame = frame.drop(columns="source_row")
        self.base = TokenTable(frame.reset_index(drop=True), base.rosters)
        self.models = models
        self.n_bins = n_bins
        self.hold_fixed = hold_fixed
        if corpus not in ("common", "control"):
            raise ValidationError("corpus must be 'common' or 'control'")
        self.corpus = corpus
        self.base_stats = pooled_stats(self.base)
        self.base_bins = make_length_bins(self.base, n_bins)
        self.cache = {
            (g, pw): _TermCache(getattr(models[g], pw), self.base.frame)
            for g in GROUPS
            for pw in ("skip", "duration")
        }

    # ------------------------------------------------------------------
    def _ert(self, gs: str, gd: str, rows: np.ndarray, clamp=None) -> np.ndarray:
        p = expit(self.cache[(gs, "skip")].eta(rows, clamp))
        dur = self.cache[(gd, "duration")]
        t = np.exp(dur.eta(rows, clamp)) * dur.model.smearing_factor
        return ert(p, t)

    @staticmethod
    def _balanced(values: np.ndarray, codes: np.ndarray) -> float:
        sums = np.bincount(codes, weights=values)
        counts = np.bincount(codes)
        keep = counts > 0
        return float(np.mean(sums[keep] / counts[keep]))

    def _context(self, table: TokenTable) -> tuple[PooledStats, LengthBins]:
        if self.hold_fixed:
            stats = replace(self.base_stats, means=pooled_stats(table).means)
            return stats, self.base_bins
        return pooled_stats(table), make_length_bins(table, self.n_bins)

    def __call__(self, table: TokenTable) -> dict[str, float]:
        frame = table.frame
        if "source_row" in frame.columns:
            rows = frame["source_row"].to_numpy(dtype=np.int64)
        else:
            if len(frame) != len(self.base.frame):
                raise ValidationError("table without source_row must be the base table")
            rows = np.arange(len(frame))
        stats, bins = self._context(table)
        out: dict[str, float] = {}

        contrasts = {g: feature_contrasts(self.models[g], stats, bins, g) for g in GROUPS}
        for g in GROUPS:
            for f in FEATURES:
                for pw in PATHWAYS:
                    out[f"delta/{pw}/{g}/{f}"] = contrasts[g][f][pw].delta
        for f in FEATURES:
            for pw in PATHWAYS:
                try:
                    out[f"sr/{pw}/{f}"] = slope_ratio(contrasts["dyslexic"][f][pw], contrasts["control"][f][pw]).sr
                except UndefinedRatioError:
                    out[f"sr/{pw}/{f}"] = math.nan

        groups = frame["group"].to_numpy()
        codes = pd.factorize(frame["subject_id"].to_numpy(), sort=True)[0]
        lengths = frame["length"].to_numpy(dtype=float)
        bin_idx = bins.assign(lengths)
        q3 = np.asarray(bins.zipf_q3, dtype=float)
        n = rows.size
        clamp_values = {
            "length": np.full(n, stats.q1["length"]),
            "surprisal": np.full(n, stats.q1["surprisal"]),
            "zipf": q3[bin_idx],
        }

        def gap(features) -> float:
            means = {}
            for g in GROUPS:
                sel = groups == g
                clamp = {f: clamp_values[f][sel] for f in features}
                means[g] = self._balanced(self._ert(g, g, rows[sel], clamp), codes[sel])
            return means["dyslexic"] - means["control"]

        g0 = gap(())
        g_cf = gap(FEATURES)
        out["gap/g0"] = g0
        out["gap/g_cf"] = g_cf
        out["gap/reduction"] = g0 - g_cf
        for f in FEATURES:
            out[f"attr/{f}"] = g0 - gap((f,))

        sel = np.ones(n, dtype=bool) if self.corpus == "common" else groups == "control"
        r, c = rows[sel], codes[sel]
        e = {a[0] + b[0]: self._balanced(self._ert(a, b, r), c) for a in GROUPS for b in GROUPS}
        out["gap/skip"] = 0.5 * ((e["dc"] - e["cc"]) + (e["dd"] - e["cd"]))
        out["gap/duration"] = 0.5 * ((e["dd"] - e["dc"]) + (e["cd"] - e["cc"]))
        out["gap/common"] = e["dd"] - e["cc"]
        return out
