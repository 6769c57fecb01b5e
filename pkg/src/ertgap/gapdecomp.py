"""Dyslexic-control ERT gap: baseline, equal-ease counterfactual and attributions."""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .corpus import FEATURES, GROUPS, LengthBins, PooledStats, TokenTable
from .effects import ert
from .errors import ErtgapError, NumericalError, ValidationError
from .gam import predict_skip, predict_trt_ms
from .modeling import INTERACTIONS, FitBundle, GroupModels, ModelConfig, fit_all

logger = logging.getLogger(__name__)

CORPUS_MODES = ("common", "control")
ATTRIBUTION_MODES = ("single", "shapley")
BIN_COLUMN = "_length_bin"  # original length bin, kept so clamping is idempotent


def subject_balanced_mean(values: np.ndarray, subjects: np.ndarray) -> float:
    """Mean of per-subject means: every subject counts once whatever its token count."""
    codes, uniq = pd.factorize(np.asarray(subjects), sort=True)
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v)
    sums = np.bincount(codes[ok], weights=v[ok], minlength=uniq.size)
    counts = np.bincount(codes[ok], minlength=uniq.size)
    if (counts == 0).any():
        warnings.warn(f"{int((counts == 0).sum())} subject(s) without usable tokens excluded")
    if not (counts > 0).any():
        raise ValidationError("no subject has usable tokens")
    return float(np.mean(sums[counts > 0] / counts[counts > 0]))


def predicted_ert(models: GroupModels, frame: Mapping) -> np.ndarray:
    return ert(predict_skip(models.skip, frame), predict_trt_ms(models.duration, frame))


def _eval_frame(table: TokenTable | pd.DataFrame) -> pd.DataFrame:
    if isinstance(table, TokenTable):
        return table.complete().frame
    return table.dropna(subset=list(FEATURES))


def group_means(models: Mapping[str, GroupModels], table: TokenTable | pd.DataFrame) -> dict[str, float]:
    """Subject-balanced mean predicted ERT per group over the group's own tokens."""
    frame = _eval_frame(table)
    out = {}
    for g in GROUPS:
        gf = frame[frame["group"] == g]
        if len(gf) == 0:
            raise ValidationError(f"no tokens for group {g!r}")
        out[g] = subject_balanced_mean(predicted_ert(models[g], gf), gf["subject_id"].to_numpy())
    return out


def baseline_gap(models: Mapping[str, GroupModels], table: TokenTable | pd.DataFrame) -> float:
    """Dyslexic minus control subject-balanced mean predicted ERT (ms/word)."""
    m = group_means(models, table)
    return m["dyslexic"] - m["control"]


def clamp_equal_ease(
    frame: pd.DataFrame,
    stats: PooledStats,
    bins: LengthBins,
    features: Sequence[str] = FEATURES,
) -> pd.DataFrame:
    """Set the chosen features to their easy values.

    Length and surprisal go to the pooled Q1; zipf goes to the Q3 of the
    token's original length bin. The original bin is stored in a helper
    column so a second clamp is a no-op.
    """
    unknown = set(features) - set(FEATURES)
    if unknown:
        raise ValidationError(f"unknown features {sorted(unknown)}")
    out = frame.copy()
    if BIN_COLUMN not in out.columns:
        out[BIN_COLUMN] = bins.assign(out["length"].to_numpy(dtype=float))
    for f in ("length", "surprisal"):
        if f in features:
            out[f] = stats.q1[f]
    if "zipf" in features:
        idx = out[BIN_COLUMN].to_numpy()
        if idx.size and (idx.min() < 0 or idx.max() >= bins.k):
            raise ErtgapError("token outside every length bin")
        q3 = np.asarray(bins.zipf_q3, dtype=float)
        if np.isnan(q3[np.unique(idx)]).any():
            raise ValidationError("a populated length bin has no zipf Q3")
        out["zipf"] = q3[idx]
    return out


def equal_ease(
    models: Mapping[str, GroupModels],
    table: TokenTable | pd.DataFrame,
    stats: PooledStats,
    bins: LengthBins,
) -> tuple[float, float]:
    """``(g_cf, reduction)`` after clamping every token to easy feature values."""
    frame = _eval_frame(table)
    g0 = baseline_gap(models, frame)
    g_cf = baseline_gap(models, clamp_equal_ease(frame, stats, bins))
    return g_cf, g0 - g_cf


@dataclass(frozen=True)
class PathwayShapley:
    skip: float
    duration: float
    order_a: tuple[float, float]  # skip first: (skip, duration)
    order_b: tuple[float, float]  # duration first: (skip, duration)
    ert: Mapping[str, float]      # "cc", "dc", "cd", "dd": skip-group letter then duration-group letter
    corpus: str = "common"

    @property
    def total(self) -> float:
        return self.ert["dd"] - self.ert["cc"]

    @property
    def order_gap(self) -> tuple[float, float]:
        """Absolute order-A minus order-B difference per pathway."""
        return (abs(self.order_a[0] - self.order_b[0]), abs(self.order_a[1] - self.order_b[1]))


def pathway_shapley(
    models: Mapping[str, GroupModels],
    table: TokenTable | pd.DataFrame,
    corpus: str = "common",
) -> PathwayShapley:
    """Two-order Shapley split of the gap between the skip and duration pathways.

    ``ERT(gs, gd)`` pairs group ``gs``'s skip model with ``gd``'s duration
    model and averages over a shared corpus: all subjects of both groups
    (``"common"``) or control subjects only (``"control"``), each subject
    weighted equally.
    """
    if corpus not in CORPUS_MODES:
        raise ValidationError(f"corpus must be one of {CORPUS_MODES}")
    frame = _eval_frame(table)
    if corpus == "control":
        frame = frame[frame["group"] == "control"]
    if len(frame) == 0:
        raise ValidationError("empty evaluation corpus")
    subj = frame["subject_id"].to_numpy()
    p = {g[0]: predict_skip(models[g].skip, frame) for g in GROUPS}
    t = {g[0]: predict_trt_ms(models[g].duration, frame) for g in GROUPS}
    e = {a + b: subject_balanced_mean(ert(p[a], t[b]), subj) for a in "cd" for b in "cd"}
    a_skip, a_dur = e["dc"] - e["cc"], e["dd"] - e["dc"]
    b_dur, b_skip = e["cd"] - e["cc"], e["dd"] - e["cd"]
    return PathwayShapley(
        skip=0.5 * (a_skip + b_skip),
        duration=0.5 * (a_dur + b_dur),
        order_a=(a_skip, a_dur),
        order_b=(b_skip, b_dur),
        ert=e,
        corpus=corpus,
    )


@dataclass(frozen=True)
class ConfigAttribution:
    """Feature attribution for one interaction configuration."""

    interactions: tuple[tuple[str, str], ...]
    g0: float
    g_cf: float
    joint_reduction: float
    single: Mapping[str, float]
    normalized: Mapping[str, float]
    shapley: Mapping[str, float] = field(default_factory=dict)

    @property
    def label(self) -> str:
        if not self.interactions:
            return "additive"
        return "+".join(f"{a}x{b}" for a, b in self.interactions)

    @property
    def additivity_gap(self) -> float:
        """Joint reduction minus the sum of single-clamp reductions."""
        return self.joint_reduction - sum(self.single.values())


def _normalize(single: Mapping[str, float], joint: float) -> dict[str, float]:
    total = sum(single.values())
    if total == 0:
        if joint == 0:
            return {f: 0.0 for f in single}
        warnings.warn("single-clamp reductions sum to zero; normalized variant undefined")
        return {f: math.nan for f in single}
    scale = joint / total
    return {f: v * scale for f, v in single.items()}


def attribute_features(
    models: Mapping[str, GroupModels],
    table: TokenTable | pd.DataFrame,
    stats: PooledStats,
    bins: LengthBins,
    interactions: Sequence[tuple[str, str]] = (),
    shapley: bool = True,
) -> ConfigAttribution:
    """Single-clamp and Shapley-over-clamps feature reductions for fitted models."""
    frame = _eval_frame(table)
    gap_cache: dict[frozenset, float] = {}

    def gap(subset: frozenset) -> float:
        if subset not in gap_cache:
            f = clamp_equal_ease(frame, stats, bins, tuple(sorted(subset))) if subset else frame
            gap_cache[subset] = baseline_gap(models, f)
        return gap_cache[subset]

    g0 = gap(frozenset())
    everything = frozenset(FEATURES)
    g_cf = gap(everything)
    joint = g0 - g_cf
    single = {f: g0 - gap(frozenset([f])) for f in FEATURES}
    sh: dict[str, float] = {}
    if shapley:
        n = len(FEATURES)
        for f in FEATURES:
            others = [o for o in FEATURES if o != f]
            total = 0.0
            for r in range(n):
                w = math.factorial(r) * math.factorial(n - r - 1) / math.factorial(n)
                for combo in itertools.combinations(others, r):
                    s = frozenset(combo)
                    total += w * (gap(s) - gap(s | {f}))
            sh[f] = total
    return ConfigAttribution(
        interactions=tuple(tuple(p) for p in interactions),
        g0=g0,
        g_cf=g_cf,
        joint_reduction=joint,
        single=single,
        normalized=_normalize(single, joint),
        shapley=sh,
    )


def interaction_configurations(pairs: Sequence[tuple[str, str]] = INTERACTIONS) -> list[tuple[tuple[str, str], ...]]:
    """All subsets of the pairwise interactions, additive model first."""
    out = []
    for r in range(len(pairs) + 1):
        out.extend(itertools.combinations([tuple(p) for p in pairs], r))
    return out


@dataclass(frozen=True)
class FeatureAttribution:
    mode: str
    contributions: Mapping[str, float]
    normalized: Mapping[str, float]
    configs: tuple[ConfigAttribution, ...]
    failed: tuple[str, ...] = ()

    @property
    def raw_sum(self) -> float:
        return float(sum(self.contributions.values()))


def _average(configs: Sequence[ConfigAttribution], attr: str) -> dict[str, float]:
    return {f: float(np.mean([getattr(c, attr)[f] for c in configs])) for f in FEATURES}


def feature_attribution(
    table: TokenTable,
    stats: PooledStats,
    bins: LengthBins,
    config: ModelConfig,
    mode: str = "single",
    configurations: Sequence[Sequence[tuple[str, str]]] | None = None,
    fitter: Callable[[TokenTable, ModelConfig, Sequence[tuple[str, str]]], FitBundle] | None = None,
    fitted: Mapping[tuple, Mapping[str, GroupModels]] | None = None,
) -> FeatureAttribution:
    """Average per-feature gap reductions over the interaction configurations.

    Each configuration adds its tensor terms to both groups' skip and
    duration models. A configuration whose fit fails numerically is
    dropped from the average with a warning. ``fitted`` supplies models
    that already exist, keyed by the configuration's interaction tuple.
    """
    if mode not in ATTRIBUTION_MODES:
        raise ValidationError(f"mode must be one of {ATTRIBUTION_MODES}")
    configurations = interaction_configurations() if configurations is None else configurations
    if fitter is None:
        def fitter(t, c, inter):
            return fit_all(t, c, inter, validate_model=False)
    results, failed = [], []
    for inter in configurations:
        key = tuple(tuple(p) for p in inter)
        try:
            if fitted is not None and key in fitted:
                models = fitted[key]
            else:
                models = fitter(table, config, key).models
            results.append(attribute_features(models, table, stats, bins, key, shapley=(mode == "shapley")))
        except NumericalError as exc:
            label = "+".join(f"{a}x{b}" for a, b in key) or "additive"
            warnings.warn(f"interaction configuration {label} failed and is excluded: {exc}")
            failed.append(label)
    if not results:
        raise NumericalError("every interaction configuration failed")
    contributions = _average(results, "single" if mode == "single" else "shapley")
    return FeatureAttribution(
        mode=mode,
        contributions=contributions,
        normalized=_average(results, "normalized"),
        configs=tuple(results),
        failed=tuple(failed),
    )


@dataclass(frozen=True)
class GapDecomposition:
    g0: float
    g_cf: float
    reduction: float
    skip_contrib: float
    dur_contrib: float
    feature_contribs: Mapping[str, float]
    interactions: tuple[tuple[str, str], ...] = ()
    corpus: str = "common"
    common_gap: float = math.nan
    order_a: tuple[float, float] = (math.nan, math.nan)
    order_b: tuple[float, float] = (math.nan, math.nan)
    feature_contribs_normalized: Mapping[str, float] = field(default_factory=dict)
    attribution_mode: str = "single"

    def record(self) -> dict:
        return {
            "g0": self.g0,
            "g_cf": self.g_cf,
            "reduction": self.reduction,
            "skip_contrib": self.skip_contrib,
            "dur_contrib": self.dur_contrib,
            "common_gap": self.common_gap,
            "order_a": list(self.order_a),
            "order_b": list(self.order_b),
            "feature_contribs": dict(self.feature_contribs),
            "feature_contribs_normalized": dict(self.feature_contribs_normalized),
            "interactions": [list(p) for p in self.interactions],
            "corpus": self.corpus,
            "attribution_mode": self.attribution_mode,
        }


def decompose(
    models: Mapping[str, GroupModels],
    table: TokenTable,
    stats: PooledStats,
    bins: LengthBins,
    corpus: str = "common",
    attribution: FeatureAttribution | None = None,
) -> GapDecomposition:
    """Assemble the gap, equal-ease and pathway pieces for one set of models.

    Without ``attribution`` the feature contributions come from single clamps
    on these models alone.
    """
    frame = _eval_frame(table)
    g0 = baseline_gap(models, frame)
    g_cf = baseline_gap(models, clamp_equal_ease(frame, stats, bins))
    sh = pathway_shapley(models, frame, corpus)
    if attribution is None:
        ca = attribute_features(models, frame, stats, bins, shapley=False)
        feats, norm, mode = dict(ca.single), dict(ca.normalized), "single"
    else:
        feats, norm, mode = dict(attribution.contributions), dict(attribution.normalized), attribution.mode
    return GapDecomposition(
        g0=g0,
        g_cf=g_cf,
        reduction=g0 - g_cf,
        skip_contrib=sh.skip,
        dur_contrib=sh.duration,
        feature_contribs=feats,
        corpus=corpus,
        common_gap=sh.total,
        order_a=sh.order_a,
        order_b=sh.order_b,
        feature_contribs_normalized=norm,
        attribution_mode=mode,
    )
