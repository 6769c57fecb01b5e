"""Pipeline stages. Each stage reads its inputs from, and writes its outputs to, the output directory.

Stages communicate only through files under ``out_dir``:

``lexicon/``   frequency lexicon and aligned word surprisal
``tokens/``    the analysis sample (trimmed, complete rows) and its preprocessing record
``models/``    serialized skip and duration models per group, selection and validation records
``contrasts/`` Q1 -> Q3 contrasts and slope ratios
``decomp/``    gap decomposition and per-configuration feature attribution
``bootstrap/`` subject-bootstrap intervals and p-values
``report/``    figure data, plots, per-hypothesis summaries, synthetic recovery
``synth/``     synthetic token file and its truth record

Every JSON artifact carries a ``config_hash`` key and every delimited table
starts with a ``# config_hash: <hash>`` comment line. The token file itself
stays in the plain ingest format; its hash and checksum live in
``tokens/manifest.json``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from . import features as feat
from . import synth
from .config import RunConfig
from .corpus import (
    FEATURES,
    GROUPS,
    LengthBins,
    PooledStats,
    TokenTable,
    ingest_tokens,
    make_length_bins,
    orientation_check,
    pooled_stats,
    trim_outliers,
    write_tokens,
)
from .effects import PATHWAYS, feature_contrasts, slope_ratio
from .errors import MissingArtifactError, UndefinedRatioError, ValidationError
from .gam import linear_predictor
from .gam.io import model_from_record, model_to_record
from .gapdecomp import decompose, feature_attribution, interaction_configurations
from .headline import HeadlineStatistics, null_values
from .inference import bootstrap_many
from .metrics import r_squared
from .modeling import FitBundle, GroupModels, fit_all
from .util import dump_json, load_json

logger = logging.getLogger(__name__)

STAGES = ("lexicon", "tokens", "models", "contrasts", "decomp", "bootstrap", "report", "synth")


class Layout:
    """Artifact paths below one output directory."""

    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)

    def dir(self, stage: str) -> Path:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        return self.root / stage

    def path(self, stage: str, name: str) -> Path:
        return self.dir(stage) / name

    def output(self, stage: str, name: str) -> Path:
        """Path for writing; creates the stage directory."""
        d = self.dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        return d / name

    def require(self, stage: str, name: str) -> Path:
        p = self.path(stage, name)
        if not p.exists():
            raise MissingArtifactError(f"missing upstream artifact: {p}")
        return p

    # named artifacts
    @property
    def lexicon(self) -> Path:
        return self.path("lexicon", "lexicon.tsv")

    @property
    def surprisal(self) -> Path:
        return self.path("lexicon", "surprisal.tsv")

    @property
    def tokens(self) -> Path:
        return self.path("tokens", "tokens.tsv")

    @property
    def preprocess(self) -> Path:
        return self.path("tokens", "preprocess.json")

    @property
    def synth_tokens(self) -> Path:
        return self.path("synth", "tokens.tsv")

    @property
    def truth(self) -> Path:
        return self.path("synth", "truth.json")

    def model(self, group: str, pathway: str) -> Path:
        return self.path("models", f"{group}_{pathway}.json")


# ---------------------------------------------------------------------------
# artifact I/O


def write_table(frame: pd.DataFrame, path: Path, cfg_hash: str) -> None:
    """Tab-separated table preceded by a config-hash comment line."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash: {cfg_hash}\n")
        frame.to_csv(fh, sep="\t", index=False, na_rep="NA", float_format="%.10g", lineterminator="\n")


def read_table(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", comment="#", na_values=["NA"], keep_default_na=False)


def write_record(obj: Mapping, path: Path, cfg_hash: str) -> None:
    dump_json({**obj, "config_hash": cfg_hash}, path)


def read_record(layout: Layout, stage: str, name: str, cfg: RunConfig | None = None) -> dict:
    rec = load_json(layout.require(stage, name))
    if cfg is not None and rec.get("config_hash") != cfg.hash:
        logger.warning("%s was written under config %s; current config is %s",
                       layout.path(stage, name), rec.get("config_hash"), cfg.hash)
    return rec


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_tokens(layout: Layout) -> TokenTable:
    return ingest_tokens(layout.require("tokens", "tokens.tsv"))


def load_preprocess(layout: Layout, cfg: RunConfig | None = None) -> tuple[PooledStats, LengthBins, dict]:
    rec = read_record(layout, "tokens", "preprocess.json", cfg)
    return PooledStats.from_record(rec["stats"]), LengthBins.from_record(rec["bins"]), rec


def save_models(bundle: FitBundle, layout: Layout, cfg: RunConfig) -> None:
    for g, gm in bundle.models.items():
        for pw in ("skip", "duration"):
            rec = {"group": g, "pathway": pw, "model": model_to_record(getattr(gm, pw))}
            write_record(rec, layout.output("models", f"{g}_{pw}.json"), cfg.hash)


def load_models(layout: Layout, cfg: RunConfig | None = None) -> dict[str, GroupModels]:
    out = {}
    for g in GROUPS:
        parts = {}
        for pw in ("skip", "duration"):
            rec = read_record(layout, "models", f"{g}_{pw}.json", cfg)
            parts[pw] = model_from_record(rec["model"])
        out[g] = GroupModels(parts["skip"], parts["duration"])
    return out


# ---------------------------------------------------------------------------
# stages


def build_lexicon_stage(cfg: RunConfig, layout: Layout) -> dict:
    if not cfg.frequency_paths:
        raise ValidationError("build-lexicon needs frequency_paths (config or --frequency)")
    for p in cfg.frequency_paths:
        if not Path(p).exists():
            raise MissingArtifactError(f"missing frequency list: {p}")
    lex = feat.build_lexicon(cfg.frequency_paths, max_types=cfg.lexicon_max_types,
                             min_count=cfg.lexicon_min_count)
    path = layout.output("lexicon", "lexicon.tsv")
    feat.write_lexicon(lex, path)
    manifest = {
        "sources": list(cfg.frequency_paths),
        "retained_types": lex.retained_types,
        "total_tokens": lex.total_tokens,
        "sha256": _sha256(path),
    }
    write_record(manifest, layout.output("lexicon", "lexicon_manifest.json"), cfg.hash)
    return manifest


def align_surprisal_stage(cfg: RunConfig, layout: Layout) -> dict:
    for key in ("word_spans_path", "subtoken_scores_path"):
        p = getattr(cfg, key)
        if p is None:
            raise ValidationError(f"align-surprisal needs {key}")
        if not Path(p).exists():
            raise MissingArtifactError(f"missing input: {p}")
    spans = feat.read_word_spans(cfg.word_spans_path)
    scores = feat.read_subtoken_scores(cfg.subtoken_scores_path)
    rows = feat.align_documents(spans, scores)
    frame = pd.DataFrame(rows, columns=["doc_id", "word_pos", "surprisal_bits"])
    write_table(frame, layout.output("lexicon", "surprisal.tsv"), cfg.hash)
    summary = {
        "n_words": int(len(frame)),
        "n_missing": int(frame["surprisal_bits"].isna().sum()),
        "documents": len(spans),
    }
    write_record(summary, layout.output("lexicon", "surprisal_manifest.json"), cfg.hash)
    return summary


def _document_positions(frame: pd.DataFrame) -> np.ndarray:
    """Document-level word index of each token, as used by the word-span file.

    When ``word_pos`` is already unique within a document it is used as is.
    When it restarts in every sentence, words are numbered from 0 in
    (sentence_id, word_pos) order within each document.
    """
    keys = frame[["doc_id", "sentence_id", "word_pos"]].drop_duplicates()
    if not keys.duplicated(subset=["doc_id", "word_pos"]).any():
        return frame["word_pos"].to_numpy()
    keys = keys.sort_values(["doc_id", "sentence_id", "word_pos"])
    keys["doc_pos"] = keys.groupby("doc_id").cumcount()
    merged = frame[["doc_id", "sentence_id", "word_pos"]].merge(keys, how="left", on=["doc_id", "sentence_id", "word_pos"])
    return merged["doc_pos"].to_numpy()


def _fill_features(table: TokenTable, layout: Layout) -> tuple[TokenTable, dict]:
    """Fill missing zipf and surprisal values from the lexicon-stage artifacts, when present."""
    frame = table.frame.copy()
    filled = {"zipf": 0, "surprisal": 0}
    if layout.lexicon.exists():
        lex = feat.read_lexicon(layout.lexicon)
        uniq = {w: feat.zipf(w, lex) for w in frame["word"].unique()}
        found = frame["word"].map(lambda w: uniq[w] is not None)
        filled["lexicon_coverage"] = float(found.mean())
        logger.info("lexicon covers %.1f%% of tokens", 100 * filled["lexicon_coverage"])
        miss = frame["zipf"].isna()
        if miss.any():
            words = frame.loc[miss, "word"]
            vals = words.map(lambda w: math.nan if uniq[w] is None else uniq[w]).astype(float)
            frame.loc[miss, "zipf"] = vals.to_numpy()
            filled["zipf"] = int(vals.notna().sum())
    if layout.surprisal.exists():
        surp = read_table(layout.surprisal)
        miss = frame["surprisal"].isna()
        if miss.any():
            lookup = pd.Series(surp["surprisal_bits"].to_numpy(dtype=float),
                               index=pd.MultiIndex.from_frame(surp[["doc_id", "word_pos"]]))
            doc_pos = _document_positions(frame)
            want = pd.MultiIndex.from_arrays([frame.loc[miss, "doc_id"], doc_pos[miss.to_numpy()]])
            vals = lookup.reindex(want).to_numpy()
            frame.loc[miss, "surprisal"] = vals
            filled["surprisal"] = int(np.isfinite(vals).sum())
    if any(filled.values()):
        logger.info("filled features from lexicon artifacts: %s", filled)
    return table.with_frame(frame), filled


def tokens_source(cfg: RunConfig, layout: Layout) -> Path:
    if cfg.tokens_path is not None:
        p = Path(cfg.tokens_path)
        if not p.exists():
            raise MissingArtifactError(f"missing token file: {p}")
        return p
    if layout.synth_tokens.exists():
        logger.info("no tokens_path configured; using %s", layout.synth_tokens)
        return layout.synth_tokens
    raise MissingArtifactError(f"no tokens_path configured and missing upstream artifact: {layout.synth_tokens}")


def preprocess(table: TokenTable, cfg: RunConfig) -> tuple[TokenTable, dict]:
    """Trim, keep complete rows, compute pooled statistics and length bins."""
    trimmed, trim = trim_outliers(table, n_sd=cfg.trim_sd, rule=cfg.trim_rule)
    analysis = trimmed.complete()
    n_incomplete = len(trimmed) - len(analysis)
    stats = pooled_stats(analysis)
    orientation = orientation_check(stats)
    bins = make_length_bins(analysis, cfg.n_bins)
    record = {
        "n_input": len(table),
        "n_trimmed": trim.removed,
        "n_incomplete": n_incomplete,
        "n_analysis": len(analysis),
        "trim": {**trim.as_record(), "rule": cfg.trim_rule, "n_sd": cfg.trim_sd},
        "stats": stats.as_record(),
        "bins": bins.as_record(),
        "orientation": orientation,
        "rosters": {g: list(analysis.rosters.get(g, ())) for g in GROUPS},
    }
    return analysis, record


def ingest_stage(cfg: RunConfig, layout: Layout) -> dict:
    source = tokens_source(cfg, layout)
    table = ingest_tokens(source)
    table, filled = _fill_features(table, layout)
    analysis, record = preprocess(table, cfg)
    for line in record["orientation"]:
        logger.info("orientation %s", line)
    path = layout.output("tokens", "tokens.tsv")
    write_tokens(analysis, path)
    record["source"] = str(source)
    record["filled"] = filled
    write_record(record, layout.output("tokens", "preprocess.json"), cfg.hash)
    manifest = {"tokens": path.name, "sha256": _sha256(path), "rows": len(analysis), "source": str(source)}
    write_record(manifest, layout.output("tokens", "manifest.json"), cfg.hash)
    return record


def _fit_diagnostics(bundle: FitBundle, table: TokenTable) -> list[dict]:
    """Cross-validated score plus in-sample fit per group and pathway."""
    out = []
    for rec in bundle.records:
        data = table.group_frame(rec.group)
        row = {
            "group": rec.group,
            "pathway": rec.pathway,
            "lambda": rec.selection.lam,
            "tensor_lambda": rec.tensor_selection.lam if rec.tensor_selection else math.nan,
            "cv_metric": rec.validation.metric if rec.validation else "",
            "cv_mean": rec.validation.mean if rec.validation else math.nan,
            "cv_folds_skipped": len(rec.validation.skipped_folds) if rec.validation else 0,
        }
        model = getattr(bundle.models[rec.group], rec.pathway)
        if rec.pathway == "duration":
            fix = data[data["skip"] == 0]
            row["r2_log"] = r_squared(np.log(fix["trt_ms"].to_numpy()), linear_predictor(model, fix))
            row["smearing_factor"] = model.smearing_factor
        else:
            row["r2_log"] = math.nan
            row["smearing_factor"] = math.nan
        row["n_obs"] = model.info.n_obs
        row["converged"] = model.info.converged
        out.append(row)
    return out


def fit_stage(cfg: RunConfig, layout: Layout) -> FitBundle:
    table = load_tokens(layout)
    bundle = fit_all(table, cfg.model_config())
    save_models(bundle, layout, cfg)
    grid = []
    for rec in bundle.records:
        for sel in (rec.selection, rec.tensor_selection):
            if sel is None:
                continue
            for r in sel.records():
                grid.append({"group": rec.group, "pathway": rec.pathway, **r})
    write_table(pd.DataFrame(grid), layout.output("models", "selection.tsv"), cfg.hash)
    diag = _fit_diagnostics(bundle, table)
    write_table(pd.DataFrame(diag), layout.output("models", "diagnostics.tsv"), cfg.hash)
    folds = [
        {"group": r.group, "pathway": r.pathway, "metric": r.validation.metric,
         "fold_scores": list(r.validation.fold_scores), "mean": r.validation.mean}
        for r in bundle.records if r.validation is not None
    ]
    write_record({"validation": folds, "diagnostics": diag}, layout.output("models", "fit.json"), cfg.hash)
    return bundle


def contrast_table(models: Mapping[str, GroupModels], stats: PooledStats, bins: LengthBins) -> pd.DataFrame:
    rows = []
    for g in GROUPS:
        for f, by_pw in feature_contrasts(models[g], stats, bins, g).items():
            for pw in PATHWAYS:
                rows.append(by_pw[pw].record())
    return pd.DataFrame(rows)


def contrast_stage(cfg: RunConfig, layout: Layout) -> pd.DataFrame:
    stats, bins, _ = load_preprocess(layout, cfg)
    models = load_models(layout, cfg)
    frame = contrast_table(models, stats, bins)
    write_table(frame, layout.output("contrasts", "contrasts.tsv"), cfg.hash)
    per_bin = []
    for g in GROUPS:
        zc = feature_contrasts(models[g], stats, bins, g)["zipf"]
        for pw in PATHWAYS:
            c = zc[pw]
            for j, (d, w, lo, hi) in enumerate(zip(c.bin_deltas, c.bin_weights, c.bin_q1, c.bin_q3)):
                per_bin.append({"group": g, "pathway": pw, "bin": j, "zipf_q1": lo, "zipf_q3": hi,
                                "weight": w, "delta": d})
    write_table(pd.DataFrame(per_bin), layout.output("contrasts", "zipf_bins.tsv"), cfg.hash)
    return frame


def slope_ratio_table(models: Mapping[str, GroupModels], stats: PooledStats, bins: LengthBins) -> pd.DataFrame:
    contrasts = {g: feature_contrasts(models[g], stats, bins, g) for g in GROUPS}
    rows = []
    for f in FEATURES:
        for pw in PATHWAYS:
            try:
                rows.append(slope_ratio(contrasts["dyslexic"][f][pw], contrasts["control"][f][pw]).record())
            except UndefinedRatioError as exc:
                logger.warning("slope ratio %s/%s undefined: %s", pw, f, exc)
                rows.append({"feature": f, "pathway": pw, "sr": math.nan,
                             "abs_delta_dyslexic": abs(contrasts["dyslexic"][f][pw].delta),
                             "abs_delta_control": abs(contrasts["control"][f][pw].delta),
                             "ratio_of_deltas": math.nan})
    return pd.DataFrame(rows)


def slope_ratio_stage(cfg: RunConfig, layout: Layout) -> pd.DataFrame:
    stats, bins, _ = load_preprocess(layout, cfg)
    models = load_models(layout, cfg)
    frame = slope_ratio_table(models, stats, bins)
    write_table(frame, layout.output("contrasts", "slope_ratios.tsv"), cfg.hash)
    return frame


def _lams(layout: Layout) -> dict[tuple[str, str], float]:
    """Smoothing parameters chosen at the fit stage, reused for the interaction configurations."""
    diag = read_table(layout.require("models", "diagnostics.tsv"))
    return {(r.group, r.pathway): float(r["lambda"]) for _, r in diag.iterrows()}


def decompose_stage(cfg: RunConfig, layout: Layout) -> dict:
    table = load_tokens(layout)
    stats, bins, _ = load_preprocess(layout, cfg)
    models = load_models(layout, cfg)
    configs = interaction_configurations() if cfg.attribution_configs == "all" else [()]
    lams = _lams(layout)
    mc = cfg.model_config()

    def fitter(t, c, inter):
        return fit_all(t, c, inter, frozen_lams=lams, validate_model=False)

    attribution = feature_attribution(table, stats, bins, mc, mode=cfg.attribution_mode,
                                      configurations=configs, fitter=fitter, fitted={(): models})
    dec = decompose(models, table, stats, bins, corpus=cfg.shapley_corpus, attribution=attribution)
    per_config = []
    for c in attribution.configs:
        for f in FEATURES:
            per_config.append({
                "configuration": c.label,
                "feature": f,
                "single": c.single[f],
                "normalized": c.normalized[f],
                "shapley": c.shapley.get(f, math.nan) if c.shapley else math.nan,
                "g0": c.g0,
                "g_cf": c.g_cf,
                "joint_reduction": c.joint_reduction,
            })
    write_table(pd.DataFrame(per_config), layout.output("decomp", "attribution.tsv"), cfg.hash)
    record = {
        **dec.record(),
        "failed_configurations": list(attribution.failed),
        "n_configurations": len(attribution.configs),
        "raw_feature_sum": attribution.raw_sum,
    }
    write_record(record, layout.output("decomp", "decomposition.json"), cfg.hash)
    return record


def bootstrap_stage(cfg: RunConfig, layout: Layout) -> pd.DataFrame:
    table = load_tokens(layout)
    models = load_models(layout, cfg)
    stat = HeadlineStatistics(models, table, n_bins=cfg.n_bins, hold_fixed=cfg.bootstrap_hold_fixed,
                              corpus=cfg.shapley_corpus)
    results = bootstrap_many(stat, stat.base, b=cfg.bootstrap_b, seed=cfg.bootstrap_seed,
                             null_values=null_values(), n_jobs=cfg.bootstrap_jobs, require_finite=False)
    frame = pd.DataFrame([r.record() for r in results.values()])
    write_table(frame, layout.output("bootstrap", "bootstrap.tsv"), cfg.hash)
    first = next(iter(results.values()))
    write_record({"b": cfg.bootstrap_b, "seed": cfg.bootstrap_seed, "trace_hash": first.trace_hash,
                  "hold_fixed": cfg.bootstrap_hold_fixed, "n_statistics": len(results)},
                 layout.output("bootstrap", "bootstrap.json"), cfg.hash)
    return frame


def synth_stage(cfg: RunConfig, layout: Layout) -> synth.TruthRecord:
    sc = synth.preset(cfg.synth_preset, seed=cfg.synth_seed, n_control=cfg.synth_n_control,
                      n_dyslexic=cfg.synth_n_dyslexic, tokens_per_subject=cfg.synth_tokens_per_subject,
                      trim_sd=cfg.trim_sd, n_bins=cfg.n_bins)
    raw, truth = synth.generate(sc)
    write_tokens(raw, layout.output("synth", "tokens.tsv"))
    write_record({**truth.record(), "preset": cfg.synth_preset, "seed": cfg.synth_seed},
                 layout.output("synth", "truth.json"), cfg.hash)
    return truth
