"""Synthetic token tables with closed-form ground truth.

The generator draws one shared text (length, zipf, surprisal per token) that
every simulated subject reads. Each group has its own truth: a skip logit and
a log-TRT mean, both sums of scaled logistic curves in the three features,
plus Gaussian noise on log-TRT.

The truth record describes what the pipeline estimates after outlier
trimming: tokens with TRT above the pooled mean + ``trim_sd`` SD are dropped,
so the retained-token skip probability and fixated mean are

    F  = Phi((ln c - mu) / sigma)
    p' = p / (p + (1 - p) F)
    m' = exp(mu + sigma^2 / 2) Phi((ln c - mu - sigma^2) / sigma) / F

with ``c`` the realized threshold. Every target is a closed-form evaluation
of these functions at settings taken from the retained sample. Nothing here
touches the model-fitting, effect or decomposition code.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
import pandas as pd
from scipy.special import expit, ndtr

from .corpus import FEATURES, GROUPS, LengthBins, TokenTable, make_length_bins, quantile
from .errors import ValidationError

logger = logging.getLogger(__name__)

PATHWAYS = ("skip", "duration", "ert")
_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class Logistic:
    """``amplitude * logistic((x - center) / scale)``; the sign of ``amplitude`` sets the direction."""

    amplitude: float
    center: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError("logistic scale must be positive")

    def __call__(self, x) -> np.ndarray:
        return self.amplitude * expit((np.asarray(x, dtype=float) - self.center) / self.scale)


@dataclass(frozen=True)
class GroupTruth:
    skip_intercept: float
    skip_terms: Mapping[str, Logistic]
    trt_intercept: float  # log ms
    trt_terms: Mapping[str, Logistic]
    sigma: float = 0.5

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError("noise SD must be non-negative")
        for terms in (self.skip_terms, self.trt_terms):
            bad = set(terms) - set(FEATURES)
            if bad:
                raise ValidationError(f"unknown truth features {sorted(bad)}")

    def _sum(self, intercept: float, terms: Mapping[str, Logistic], cols: Mapping[str, np.ndarray]) -> np.ndarray:
        n = max(np.asarray(cols[f]).size for f in FEATURES)
        out = np.full(n, float(intercept))
        for f, term in terms.items():
            out = out + term(cols[f])
        return out

    def skip_logit(self, cols) -> np.ndarray:
        return self._sum(self.skip_intercept, self.skip_terms, cols)

    def log_trt_mean(self, cols) -> np.ndarray:
        return self._sum(self.trt_intercept, self.trt_terms, cols)

    def p_skip(self, cols) -> np.ndarray:
        return expit(self.skip_logit(cols))


@dataclass(frozen=True)
class FeatureDistribution:
    """Marginals of the shared text.

    Length is ``round(exp(N(length_logmean, length_logsd)))`` clipped to
    ``[1, length_max]``; zipf is Gaussian, correlated with the latent length
    draw at ``length_zipf_corr`` and clipped to ``[zipf_min, zipf_max]``;
    surprisal is Gamma clipped to ``[0, surprisal_max]``.
    """

    length_logmean: float = math.log(4.6)
    length_logsd: float = 0.5
    length_max: int = 15
    zipf_mean: float = 5.0
    zipf_sd: float = 1.1
    zipf_min: float = 2.0
    zipf_max: float = 7.0
    length_zipf_corr: float = -0.85
    surprisal_shape: float = 2.5
    surprisal_scale: float = 3.2
    surprisal_max: float = 20.0

    def __post_init__(self):
        if not -1 <= self.length_zipf_corr <= 1:
            raise ValidationError("length_zipf_corr must lie in [-1, 1]")
        if self.length_logsd < 0 or self.zipf_sd < 0:
            raise ValidationError("negative feature spread")
        if self.surprisal_shape <= 0 or self.surprisal_scale <= 0:
            raise ValidationError("surprisal gamma parameters must be positive")
        if not (1 <= self.length_max and self.zipf_min < self.zipf_max and self.surprisal_max > 0):
            raise ValidationError("empty feature range")

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        z1 = rng.standard_normal(n)
        z2 = rng.standard_normal(n)
        r = self.length_zipf_corr
        length = np.clip(np.rint(np.exp(self.length_logmean + self.length_logsd * z1)), 1, self.length_max)
        zipf = self.zipf_mean + self.zipf_sd * (r * z1 + math.sqrt(1.0 - r * r) * z2)
        zipf = np.clip(zipf, self.zipf_min, self.zipf_max)
        surprisal = np.clip(rng.gamma(self.surprisal_shape, self.surprisal_scale, n), 0.0, self.surprisal_max)
        return {"length": length.astype(np.int64), "zipf": zipf, "surprisal": surprisal}


@dataclass(frozen=True)
class SynthConfig:
    control: GroupTruth
    dyslexic: GroupTruth
    features: FeatureDistribution = field(default_factory=FeatureDistribution)
    n_control: int = 40
    n_dyslexic: int = 20
    tokens_per_subject: int = 5000
    seed: int = 0
    trim_sd: float | None = 3.0
    n_bins: int = 7
    sentence_length: int = 12
    doc_length: int = 500
    name: str = "custom"

    def __post_init__(self):
        if self.n_control < 1 or self.n_dyslexic < 1:
            raise ValidationError("each group needs at least one subject")
        if self.tokens_per_subject < 1:
            raise ValidationError("tokens_per_subject must be positive")
        if self.sentence_length < 1 or self.doc_length < 1:
            raise ValidationError("sentence and document lengths must be positive")

    def truth(self, group: str) -> GroupTruth:
        return {"control": self.control, "dyslexic": self.dyslexic}[group]

    def swapped(self) -> "SynthConfig":
        """Same config with the two groups' truths exchanged."""
        return replace(self, control=self.dyslexic, dyslexic=self.control,
                       n_control=self.n_dyslexic, n_dyslexic=self.n_control)


# ---------------------------------------------------------------------------
# retained-token truth


def retained(truth: GroupTruth, cols: Mapping[str, np.ndarray], threshold: float | None
             ) -> tuple[np.ndarray, np.ndarray]:
    """``(p', m')``: skip probability and mean TRT (ms) among tokens that survive trimming."""
    p = truth.p_skip(cols)
    mu = truth.log_trt_mean(cols)
    s = truth.sigma
    if threshold is None or not math.isfinite(threshold):
        return p, np.exp(mu + 0.5 * s * s)
    if threshold <= 0:
        raise ValidationError("trim threshold must be positive")
    lc = math.log(threshold)
    if s == 0:
        f = (mu <= lc).astype(float)
        m = np.exp(mu)
    else:
        f = ndtr((lc - mu) / s)
        with np.errstate(divide="ignore", invalid="ignore"):
            m = np.exp(mu + 0.5 * s * s) * ndtr((lc - mu - s * s) / s) / f
    with np.errstate(divide="ignore", invalid="ignore"):
        p_ret = p / (p + (1.0 - p) * f)
    return p_ret, m


def _pathways(truth: GroupTruth, cols, threshold) -> dict[str, np.ndarray]:
    p, m = retained(truth, cols, threshold)
    return {"skip": p, "duration": m, "ert": (1.0 - p) * m}


@dataclass(frozen=True)
class TruthRecord:
    """Closed-form targets keyed like the pipeline's headline statistics."""

    targets: Mapping[str, float]
    threshold: float
    q1: Mapping[str, float]
    q3: Mapping[str, float]
    group_means: Mapping[str, Mapping[str, float]]
    bins: LengthBins
    n_removed: int
    config_name: str = "custom"

    def record(self) -> dict:
        return {
            "targets": dict(self.targets),
            "threshold": self.threshold,
            "q1": dict(self.q1),
            "q3": dict(self.q3),
            "group_means": {g: dict(m) for g, m in self.group_means.items()},
            "bins": self.bins.as_record(),
            "n_removed": self.n_removed,
            "config_name": self.config_name,
        }


def _balanced(values: np.ndarray, codes: np.ndarray, weights: np.ndarray | None = None) -> float:
    w = np.ones(values.size) if weights is None else weights
    sums = np.bincount(codes, weights=values * w)
    counts = np.bincount(codes, weights=w)
    keep = counts > 0
    return float(np.mean(sums[keep] / counts[keep]))


def _truth_from_sample(config: SynthConfig, table: TokenTable, threshold: float | None, n_removed: int,
                       weights: np.ndarray | None = None) -> TruthRecord:
    """Targets on ``table``; ``weights`` (expected retention per row) replace actual trimming."""
    frame = table.frame
    cols = {f: frame[f].to_numpy(dtype=float) for f in FEATURES}
    wts = np.ones(len(frame)) if weights is None else np.asarray(weights, dtype=float)
    q1, q3 = {}, {}
    for f in FEATURES:
        lo, hi = quantile(cols[f], [0.25, 0.75])
        q1[f], q3[f] = float(lo), float(hi)
    groups = frame["group"].to_numpy()
    means = {g: {f: float(np.average(cols[f][groups == g], weights=wts[groups == g])) for f in FEATURES}
             for g in GROUPS}
    bins = make_length_bins(table, config.n_bins)
    w = np.asarray(bins.weights)
    t: dict[str, float] = {}

    # Q1 -> Q3 contrasts per pathway
    deltas: dict[tuple[str, str, str], float] = {}
    bin_deltas: dict[tuple[str, str], np.ndarray] = {}
    for g in GROUPS:
        truth = config.truth(g)
        for f in ("length", "surprisal"):
            pts = {k: np.full(2, means[g][k]) for k in FEATURES}
            pts[f] = np.array([q1[f], q3[f]])
            for pw, v in _pathways(truth, pts, threshold).items():
                deltas[(pw, g, f)] = float(v[1] - v[0])
        k = bins.k
        pts = {
            "length": np.tile(np.asarray(bins.mean_length), 2),
            "zipf": np.concatenate([bins.zipf_q1, bins.zipf_q3]),
            "surprisal": np.full(2 * k, means[g]["surprisal"]),
        }
        for pw, v in _pathways(truth, pts, threshold).items():
            d = v[k:] - v[:k]
            bin_deltas[(pw, g)] = d
            deltas[(pw, g, "zipf")] = float(w @ d)
    for (pw, g, f), d in deltas.items():
        t[f"delta/{pw}/{g}/{f}"] = d
    for pw in PATHWAYS:
        for f in FEATURES:
            if f == "zipf":
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratios = np.abs(bin_deltas[(pw, "dyslexic")]) / np.abs(bin_deltas[(pw, "control")])
                t[f"sr/{pw}/{f}"] = float(w @ ratios)
            else:
                den = deltas[(pw, "control", f)]
                t[f"sr/{pw}/{f}"] = abs(deltas[(pw, "dyslexic", f)]) / abs(den) if den != 0 else math.nan

    # gap pieces, subject-balanced over retained tokens
    codes = pd.factorize(frame["subject_id"].to_numpy(), sort=True)[0]
    bin_idx = bins.assign(cols["length"])
    clamp = {
        "length": np.full(len(frame), q1["length"]),
        "surprisal": np.full(len(frame), q1["surprisal"]),
        "zipf": np.asarray(bins.zipf_q3)[bin_idx],
    }

    def gap(clamped) -> float:
        out = {}
        for g in GROUPS:
            sel = groups == g
            pts = {f: (clamp[f] if f in clamped else cols[f])[sel] for f in FEATURES}
            out[g] = _balanced(_pathways(config.truth(g), pts, threshold)["ert"], codes[sel], wts[sel])
        return out["dyslexic"] - out["control"]

    g0 = gap(())
    g_cf = gap(FEATURES)
    t["gap/g0"] = g0
    t["gap/g_cf"] = g_cf
    t["gap/reduction"] = g0 - g_cf
    for f in FEATURES:
        t[f"attr/{f}"] = g0 - gap((f,))
    ret = {g[0]: retained(config.truth(g), cols, threshold) for g in GROUPS}
    e = {a + b: _balanced((1.0 - ret[a][0]) * ret[b][1], codes, wts) for a in "cd" for b in "cd"}
    t["gap/skip"] = 0.5 * ((e["dc"] - e["cc"]) + (e["dd"] - e["cd"]))
    t["gap/duration"] = 0.5 * ((e["dd"] - e["dc"]) + (e["cd"] - e["cc"]))
    t["gap/common"] = e["dd"] - e["cc"]
    return TruthRecord(
        targets=t,
        threshold=math.inf if threshold is None else float(threshold),
        q1=q1,
        q3=q3,
        group_means=means,
        bins=bins,
        n_removed=n_removed,
        config_name=config.name,
    )


# ---------------------------------------------------------------------------
# generation


def _text(config: SynthConfig) -> pd.DataFrame:
    n = config.tokens_per_subject
    cols = config.features.sample(n, np.random.default_rng([config.seed, 0]))
    pos = np.arange(n)
    doc = pos // config.doc_length
    within = pos % config.doc_length
    words = np.array([_LETTERS[:k] if k <= 26 else "x" * k for k in range(config.features.length_max + 1)],
                     dtype=object)
    return pd.DataFrame({
        "doc_id": doc.astype(np.int64),
        "sentence_id": (within // config.sentence_length).astype(np.int64),
        "word_pos": (within % config.sentence_length).astype(np.int64),
        "word": words[cols["length"]],
        "length": cols["length"],
        "zipf": cols["zipf"],
        "surprisal": cols["surprisal"],
    })


def generate_raw(config: SynthConfig) -> TokenTable:
    """Untrimmed synthetic table (what the token file holds)."""
    text = _text(config)
    cols = {f: text[f].to_numpy(dtype=float) for f in FEATURES}
    parts = []
    idx = 0
    for g, n_sub in (("control", config.n_control), ("dyslexic", config.n_dyslexic)):
        truth = config.truth(g)
        p = truth.p_skip(cols)
        mu = truth.log_trt_mean(cols)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(mu))):
            raise ValidationError(f"{g}: truth functions are not finite on the sampled features")
        digits = len(str(config.n_control + config.n_dyslexic))
        for j in range(n_sub):
            idx += 1
            rng = np.random.default_rng([config.seed, 1, idx])
            skip = (rng.random(p.size) < p).astype(np.int8)
            trt = np.exp(mu + truth.sigma * rng.standard_normal(p.size))
            trt = np.where(skip == 1, np.nan, np.round(trt, 3))
            part = text.copy()
            part.insert(0, "group", g)
            part.insert(0, "subject_id", f"{'c' if g == 'control' else 'd'}{str(j + 1).zfill(digits)}")
            part["skip"] = skip
            part["trt_ms"] = trt
            parts.append(part)
    frame = pd.concat(parts, ignore_index=True)
    return TokenTable.from_frame(frame, validate=False)


def _trim(table: TokenTable, n_sd: float | None) -> tuple[TokenTable, float | None, int]:
    if n_sd is None:
        return table, None, 0
    frame = table.frame
    fix = frame["skip"].to_numpy() == 0
    trt = frame["trt_ms"].to_numpy(dtype=float)
    vals = trt[fix]
    c = float(vals.mean() + n_sd * vals.std(ddof=1))
    drop = fix & (trt > c)
    return table.with_frame(frame[~drop]), c, int(drop.sum())


def generate(config: SynthConfig) -> tuple[TokenTable, TruthRecord]:
    """Draw the table and compute the matching closed-form targets.

    The returned table is untrimmed; the truth record refers to the sample
    the pipeline sees after trimming at ``config.trim_sd``.
    """
    raw = generate_raw(config)
    kept, c, removed = _trim(raw, config.trim_sd)
    return raw, _truth_from_sample(config, kept, c, removed)


def true_targets(config: SynthConfig) -> TruthRecord:
    """Targets only; regenerates the seeded sample."""
    return generate(config)[1]


def expected_threshold(config: SynthConfig, text: pd.DataFrame | None = None) -> float | None:
    """Population value of the trim threshold: pooled fixated-TRT mean + ``trim_sd`` SD."""
    if config.trim_sd is None:
        return None
    text = _text(config) if text is None else text
    cols = {f: text[f].to_numpy(dtype=float) for f in FEATURES}
    w_sum = m1 = m2 = 0.0
    for g, n_sub in (("control", config.n_control), ("dyslexic", config.n_dyslexic)):
        truth = config.truth(g)
        w = n_sub * (1.0 - truth.p_skip(cols))
        mu = truth.log_trt_mean(cols)
        s2 = truth.sigma ** 2
        w_sum += w.sum()
        m1 += w @ np.exp(mu + 0.5 * s2)
        m2 += w @ np.exp(2.0 * mu + 2.0 * s2)
    mean = m1 / w_sum
    return float(mean + config.trim_sd * math.sqrt(max(m2 / w_sum - mean * mean, 0.0)))


def population_targets(config: SynthConfig) -> tuple[TruthRecord, dict[str, float]]:
    """Noise-free targets on the shared text, plus expected raw skip rates.

    Uses the expected trim threshold and weights each token by its expected
    retention probability instead of dropping draws, so the result is a
    smooth function of the truth parameters (used for preset calibration).
    Quartiles and bins ignore the weights.
    """
    text = _text(config)
    c = expected_threshold(config, text)
    parts, weights = [], []
    cols = {f: text[f].to_numpy(dtype=float) for f in FEATURES}
    for g in GROUPS:
        truth = config.truth(g)
        p = truth.p_skip(cols)
        if c is None:
            weights.append(np.ones(p.size))
        elif truth.sigma == 0:
            weights.append(p + (1.0 - p) * (truth.log_trt_mean(cols) <= math.log(c)))
        else:
            weights.append(p + (1.0 - p) * ndtr((math.log(c) - truth.log_trt_mean(cols)) / truth.sigma))
        part = text.copy()
        part.insert(0, "group", g)
        part.insert(0, "subject_id", g)
        part["skip"] = 0
        part["trt_ms"] = 1.0
        parts.append(part)
    table = TokenTable.from_frame(pd.concat(parts, ignore_index=True), validate=False)
    rates = {g: float(config.truth(g).p_skip(cols).mean()) for g in GROUPS}
    # from_frame sorts by subject id, and "control" < "dyslexic" keeps the group order
    return _truth_from_sample(config, table, c, 0, np.concatenate(weights)), rates


# ---------------------------------------------------------------------------
# presets

# fixed curve shapes; amplitudes and intercepts come from scripts/calibrate_preset.py
_SHAPES = {
    "length": (6.0, 1.5),
    "zipf": (4.5, 1.0),
    "surprisal": (9.0, 3.0),
}


def truth_from_params(params, shapes: Mapping[str, tuple[float, float]] | None = None) -> GroupTruth:
    """Build a truth from ``(skip_b0, skip_L, skip_Z, skip_S, trt_b0, trt_L, trt_Z, trt_S, sigma)``.

    ``shapes`` maps ``"skip/<feature>"`` or ``"trt/<feature>"`` to a
    ``(center, scale)`` pair; missing entries use the preset shapes.
    """
    b0, sl, sz, ss, a0, tl, tz, ts, sigma = (float(v) for v in params)
    shapes = dict(shapes or {})

    def mk(amp: float, kind: str, f: str) -> Logistic:
        return Logistic(amp, *shapes.get(f"{kind}/{f}", _SHAPES[f]))

    return GroupTruth(
        skip_intercept=b0,
        skip_terms={"length": mk(sl, "skip", "length"), "zipf": mk(sz, "skip", "zipf"),
                    "surprisal": mk(ss, "skip", "surprisal")},
        trt_intercept=a0,
        trt_terms={"length": mk(tl, "trt", "length"), "zipf": mk(tz, "trt", "zipf"),
                   "surprisal": mk(ts, "trt", "surprisal")},
        sigma=sigma,
    )


PAPER_SHAPED = {
    "control": (0.97725, -3.01659, 1.24956, -0.168578, 5.41606, 3.0, -0.0555214, 0.0778686, 0.35),
    "dyslexic": (-0.0554352, -3.29451, 2.15518, -0.248664, 5.66455, 2.64336, -0.05, 0.150524, 0.35),
}
PAPER_SHAPED_SHAPES = {"skip/length": (3.05538, 1.51334), "trt/length": (10.3169, 1.51334)}


def preset(name: str, **overrides) -> SynthConfig:
    """Named configurations: ``paper_shaped``, ``null_model``, ``inert_zipf``.

    ``null_model`` gives both groups the control truth (every gap and SR
    deviation is zero); ``inert_zipf`` zeroes the zipf terms of the
    ``paper_shaped`` truths.
    """
    ctrl = truth_from_params(PAPER_SHAPED["control"], PAPER_SHAPED_SHAPES)
    dys = truth_from_params(PAPER_SHAPED["dyslexic"], PAPER_SHAPED_SHAPES)
    if name == "paper_shaped":
        cfg = SynthConfig(control=ctrl, dyslexic=dys, name=name)
    elif name == "null_model":
        cfg = SynthConfig(control=ctrl, dyslexic=ctrl, name=name)
    elif name == "inert_zipf":
        def no_zipf(t: GroupTruth) -> GroupTruth:
            return replace(
                t,
                skip_terms={**t.skip_terms, "zipf": Logistic(0.0, *_SHAPES["zipf"])},
                trt_terms={**t.trt_terms, "zipf": Logistic(0.0, *_SHAPES["zipf"])},
            )
        cfg = SynthConfig(control=no_zipf(ctrl), dyslexic=no_zipf(dys), name=name)
    else:
        raise ValidationError(f"unknown preset {name!r}; choose paper_shaped, null_model or inert_zipf")
    return replace(cfg, **overrides) if overrides else cfg


PRESETS = ("paper_shaped", "null_model", "inert_zipf")
