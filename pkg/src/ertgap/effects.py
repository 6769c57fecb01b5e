"""Expected reading time, Q1 -> Q3 contrasts and slope ratios."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .corpus import FEATURES, LengthBins, PooledStats
from .errors import UndefinedRatioError, ValidationError
from .gam import predict_skip, predict_trt_ms
from .modeling import GroupModels

logger = logging.getLogger(__name__)

PATHWAYS = ("skip", "duration", "ert")


def ert(p_skip, trt_ms):
    """Expected reading time ``(1 - P(skip)) * TRT``; works on scalars and arrays."""
    p = np.asarray(p_skip, dtype=float)
    t = np.asarray(trt_ms, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValidationError("skip probability outside [0, 1]")
    if np.any(t < 0):
        raise ValidationError("negative reading time")
    out = (1.0 - p) * t
    return float(out) if out.ndim == 0 else out


def predict_pathways(models: GroupModels, rows: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Skip probability, fixated TRT (ms) and their ERT join for each row."""
    p = predict_skip(models.skip, rows)
    t = predict_trt_ms(models.duration, rows)
    return {"skip": p, "duration": t, "ert": ert(p, t)}


@dataclass(frozen=True)
class Contrast:
    feature: str
    group: str
    pathway: str
    q1_value: float
    q3_value: float
    delta: float
    value_q1: float = math.nan
    value_q3: float = math.nan
    bin_deltas: tuple[float, ...] = ()
    bin_weights: tuple[float, ...] = ()
    bin_q1: tuple[float, ...] = ()
    bin_q3: tuple[float, ...] = ()

    def record(self) -> dict:
        return {
            "feature": self.feature,
            "group": self.group,
            "pathway": self.pathway,
            "q1": self.q1_value,
            "q3": self.q3_value,
            "value_q1": self.value_q1,
            "value_q3": self.value_q3,
            "delta": self.delta,
        }


def q1q3_contrast(models: GroupModels, feature: str, stats: PooledStats, group: str) -> dict[str, Contrast]:
    """Pathway deltas for moving ``feature`` from pooled Q1 to Q3, others at group means."""
    if feature == "zipf":
        raise ValidationError("zipf contrasts are bin-conditional; use zipf_conditional_contrast")
    if feature not in FEATURES:
        raise ValidationError(f"unknown feature {feature!r}")
    means = stats.group_means(group)
    q1, q3 = stats.q1[feature], stats.q3[feature]
    rows = {f: np.array([means[f], means[f]]) for f in FEATURES}
    rows[feature] = np.array([q1, q3])
    pred = predict_pathways(models, rows)
    return {
        pw: Contrast(feature, group, pw, q1, q3, float(v[1] - v[0]), float(v[0]), float(v[1]))
        for pw, v in pred.items()
    }


def _usable_bins(bins: LengthBins) -> np.ndarray:
    ok = np.isfinite(bins.zipf_q1) & np.isfinite(bins.zipf_q3) & (np.asarray(bins.weights) > 0)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} length bin(s) without zipf values excluded; weights renormalized")
    if not ok.any():
        raise ValidationError("no length bin has zipf values")
    return ok


def zipf_conditional_contrast(
    models: GroupModels, bins: LengthBins, stats: PooledStats, group: str
) -> dict[str, Contrast]:
    """Zipf Q1 -> Q3 within each pooled length bin, combined with the pooled bin weights.

    In bin ``b`` length sits at the bin's mean length, surprisal at the
    group mean and zipf moves from the bin's Q1 to its Q3.
    """
    ok = _usable_bins(bins)
    idx = np.flatnonzero(ok)
    w = np.asarray(bins.weights, dtype=float)[idx]
    w = w / w.sum()
    means = stats.group_means(group)
    zq1 = np.asarray(bins.zipf_q1, dtype=float)[idx]
    zq3 = np.asarray(bins.zipf_q3, dtype=float)[idx]
    length = np.asarray(bins.mean_length, dtype=float)[idx]
    m = idx.size
    rows = {
        "length": np.concatenate([length, length]),
        "zipf": np.concatenate([zq1, zq3]),
        "surprisal": np.full(2 * m, means["surprisal"]),
    }
    pred = predict_pathways(models, rows)
    out = {}
    for pw, v in pred.items():
        lo, hi = v[:m], v[m:]
        d = hi - lo
        out[pw] = Contrast(
            feature="zipf",
            group=group,
            pathway=pw,
            q1_value=float(w @ zq1),
            q3_value=float(w @ zq3),
            delta=float(w @ d),
            value_q1=float(w @ lo),
            value_q3=float(w @ hi),
            bin_deltas=tuple(float(x) for x in d),
            bin_weights=tuple(float(x) for x in w),
            bin_q1=tuple(float(x) for x in zq1),
            bin_q3=tuple(float(x) for x in zq3),
        )
    return out


def feature_contrasts(
    models: GroupModels, stats: PooledStats, bins: LengthBins, group: str
) -> dict[str, dict[str, Contrast]]:
    """``{feature: {pathway: Contrast}}`` for all three features."""
    return {
        "length": q1q3_contrast(models, "length", stats, group),
        "zipf": zipf_conditional_contrast(models, bins, stats, group),
        "surprisal": q1q3_contrast(models, "surprisal", stats, group),
    }


@dataclass(frozen=True)
class SlopeRatio:
    feature: str
    pathway: str
    sr: float
    numerator: float
    denominator: float
    bin_ratios: tuple[float, ...] = ()
    bin_weights: tuple[float, ...] = ()
    ratio_of_deltas: float = math.nan

    def record(self) -> dict:
        return {
            "feature": self.feature,
            "pathway": self.pathway,
            "sr": self.sr,
            "abs_delta_dyslexic": self.numerator,
            "abs_delta_control": self.denominator,
            "ratio_of_deltas": self.ratio_of_deltas,
        }


def _ratio(num: float, den: float, what: str) -> float:
    if den == 0 or not math.isfinite(den):
        raise UndefinedRatioError(f"{what}: control delta is zero; slope ratio undefined")
    return abs(num) / abs(den)


def slope_ratio(c_dys: Contrast, c_ctrl: Contrast) -> SlopeRatio:
    """``|delta_dys| / |delta_ctrl|``; bin-conditional contrasts average per-bin ratios by weight.

    A bin whose control delta is exactly zero (a flat, constraint-tied
    stretch of the curve) has no ratio; it is dropped with a warning and
    the remaining weights are renormalized.
    """
    if (c_dys.feature, c_dys.pathway) != (c_ctrl.feature, c_ctrl.pathway):
        raise ValidationError("slope ratio needs contrasts of the same feature and pathway")
    what = f"{c_dys.feature}/{c_dys.pathway}"
    if c_dys.bin_deltas and c_ctrl.bin_deltas:
        if len(c_dys.bin_deltas) != len(c_ctrl.bin_deltas):
            raise ValidationError("bin-conditional contrasts use different bins")
        num = np.abs(np.asarray(c_dys.bin_deltas, dtype=float))
        den = np.abs(np.asarray(c_ctrl.bin_deltas, dtype=float))
        w = np.asarray(c_ctrl.bin_weights, dtype=float)
        ok = den > 0
        if not ok.any():
            raise UndefinedRatioError(f"{what}: control delta is zero in every bin; slope ratio undefined")
        if not ok.all():
            warnings.warn(f"{what}: {int((~ok).sum())} bin(s) with zero control delta dropped from the SR")
        ratios = np.where(ok, num / np.where(ok, den, 1.0), np.nan)
        wk = np.where(ok, w, 0.0)
        wk = wk / wk.sum()
        sr = float(wk[ok] @ ratios[ok])
        overall = abs(c_dys.delta) / abs(c_ctrl.delta) if c_ctrl.delta != 0 else math.nan
        return SlopeRatio(c_dys.feature, c_dys.pathway, sr, abs(c_dys.delta), abs(c_ctrl.delta),
                          tuple(float(x) for x in ratios), tuple(float(x) for x in wk), overall)
    overall = _ratio(c_dys.delta, c_ctrl.delta, what)
    return SlopeRatio(c_dys.feature, c_dys.pathway, overall, abs(c_dys.delta), abs(c_ctrl.delta),
                      ratio_of_deltas=overall)


def all_slope_ratios(contrasts: Mapping[str, Mapping[str, Mapping[str, Contrast]]]) -> dict[tuple[str, str], SlopeRatio]:
    """Slope ratios for every (feature, pathway) given ``{group: {feature: {pathway: Contrast}}}``."""
    out = {}
    for f in FEATURES:
        for pw in PATHWAYS:
            out[(f, pw)] = slope_ratio(contrasts["dyslexic"][f][pw], contrasts["control"][f][pw])
    return out
