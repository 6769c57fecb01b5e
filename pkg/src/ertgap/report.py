"""Report assembly: figure data and plots, per-hypothesis summaries, synthetic recovery."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .config import RunConfig
from .corpus import FEATURES, GROUPS, TokenTable, quantile
from .gam import partial_effect
from .headline import HeadlineStatistics
from .modeling import GroupModels
from .pipeline import (
    Layout,
    contrast_table,
    load_models,
    load_preprocess,
    load_tokens,
    read_record,
    read_table,
    slope_ratio_table,
    write_record,
    write_table,
)

logger = logging.getLogger(__name__)

N_GRID = 101


def recovery_targets() -> list[str]:
    """Statistics whose recovery decides the synthetic PASS/FAIL.

    Per-group ERT contrasts, ERT slope ratios, the baseline gap and the
    equal-ease reduction. Every other truth-record target is compared and
    reported but does not change the verdict.
    """
    ids = [f"delta/ert/{g}/{f}" for g in GROUPS for f in FEATURES]
    ids += [f"sr/ert/{f}" for f in FEATURES]
    ids += ["gap/g0", "gap/reduction"]
    return ids


def tolerance(statistic: str, target: float, cfg: RunConfig) -> float:
    """Relative tolerance, or an absolute one in ms for small millisecond targets."""
    is_ms = not statistic.startswith("sr/") and not statistic.startswith("delta/skip/")
    if is_ms and abs(target) < cfg.recovery_abs_below_ms:
        return cfg.recovery_abs_tol_ms
    return cfg.recovery_rel_tol * abs(target)


def recovery_table(targets: Mapping[str, float], estimates: Mapping[str, float], cfg: RunConfig) -> pd.DataFrame:
    core = set(recovery_targets())
    rows = []
    for k, target in targets.items():
        if k not in estimates or target is None:
            continue
        est = float(estimates[k])
        target = float(target)
        tol = tolerance(k, target, cfg)
        err = est - target
        rows.append({
            "statistic": k,
            "target": target,
            "estimate": est,
            "error": err,
            "rel_error": err / abs(target) if target != 0 else math.nan,
            "tolerance": tol,
            "within": bool(math.isfinite(est) and abs(err) <= tol),
            "decisive": k in core,
        })
    return pd.DataFrame(rows)


def partial_effects(models: Mapping[str, GroupModels], table: TokenTable, means: Mapping[str, Mapping[str, float]],
                    n: int = N_GRID) -> pd.DataFrame:
    """Response-scale curves per group, pathway and feature over the pooled 1st-99th percentile range."""
    rows = []
    frame = table.frame
    for f in FEATURES:
        lo, hi = quantile(frame[f].to_numpy(dtype=float), [0.01, 0.99])
        grid = np.linspace(lo, hi, n)
        for g in GROUPS:
            for pw in ("skip", "duration"):
                xy = partial_effect(getattr(models[g], pw), f, grid, means[g])
                rows.append(pd.DataFrame({"group": g, "pathway": pw, "feature": f, "x": xy[:, 0], "y": xy[:, 1]}))
    return pd.concat(rows, ignore_index=True)


def _with_ci(frame: pd.DataFrame, boot: pd.DataFrame | None, ids: list[str]) -> pd.DataFrame:
    frame = frame.copy()
    frame["statistic"] = ids
    if boot is None:
        for c in ("ci_low", "ci_high", "p"):
            frame[c] = math.nan
        return frame
    b = boot.set_index("statistic")
    frame["ci_low"] = [b["ci_low"].get(i, math.nan) for i in ids]
    frame["ci_high"] = [b["ci_high"].get(i, math.nan) for i in ids]
    frame["p"] = [b["p"].get(i, math.nan) for i in ids]
    return frame


def _plots(fig1: pd.DataFrame, fig2: pd.DataFrame, fig3: pd.DataFrame, fig4: pd.DataFrame, layout: Layout) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "ertgap"
    meta = {"Date": None}
    colors = {"control": "tab:blue", "dyslexic": "tab:orange"}

    fig, axes = plt.subplots(2, 3, figsize=(11, 6))
    for i, pw in enumerate(("skip", "duration")):
        for j, f in enumerate(FEATURES):
            ax = axes[i, j]
            for g in GROUPS:
                d = fig1[(fig1["group"] == g) & (fig1["pathway"] == pw) & (fig1["feature"] == f)]
                ax.plot(d["x"], d["y"], color=colors[g], label=g)
            ax.set_xlabel(f)
            ax.set_ylabel("P(skip)" if pw == "skip" else "TRT (ms)")
    axes[0, 0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(layout.output("report", "fig1_partial_effects.svg"), metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ert = fig2[fig2["pathway"] == "ert"]
    x = np.arange(len(FEATURES))
    for k, g in enumerate(GROUPS):
        d = ert[ert["group"] == g].set_index("feature").loc[list(FEATURES)]
        err = np.vstack([d["delta"] - d["ci_low"], d["ci_high"] - d["delta"]])
        ax.bar(x + (k - 0.5) * 0.38, d["delta"], width=0.38, color=colors[g], label=g,
               yerr=None if np.isnan(err).all() else err)
    ax.axhline(0, color="black", lw=0.8)
    ax.set_xticks(x, FEATURES)
    ax.set_ylabel("Q1 to Q3 change in ERT (ms)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(layout.output("report", "fig2_contrasts.svg"), metadata=meta)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"{r.pathway}/{r.feature}" for r in fig3.itertuples()]
    y = np.arange(len(fig3))[::-1]
    ax.scatter(fig3["sr"], y, color="black", zorder=3)
    for yi, r in zip(y, fig3.itertuples()):
        if np.isfinite(r.ci_low):
            ax.plot([r.ci_low, r.ci_high], [yi, yi], color="black")
    ax.axvline(1.0, color="grey", ls="--", lw=0.8)
    ax.set_yticks(y, labels)
    ax.set_xlabel("slope ratio (dyslexic / control)")
    fig.tight_layout()
    fig.savefig(layout.output("report", "fig3_slope_ratios.svg"), metadata=meta)
    plt.close(fig)

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, panel in zip(axes, ("pathway", "feature")):
        d = fig4[fig4["panel"] == panel]
        ax.bar(d["step"], d["value"], bottom=d["start"], color=["grey" if k else "tab:green" for k in d["is_total"]])
        ax.set_ylabel("gap (ms)")
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(layout.output("report", "fig4_gap_waterfall.svg"), metadata=meta)
    plt.close(fig)


def waterfall(decomp: Mapping) -> pd.DataFrame:
    """Gap waterfall steps: pathway split of the common-corpus gap and feature reductions of the baseline gap."""
    rows = []
    total = float(decomp["common_gap"])
    rows.append(("pathway", "gap", 0.0, total, True))
    rows.append(("pathway", "skip", 0.0, float(decomp["skip_contrib"]), False))
    rows.append(("pathway", "duration", float(decomp["skip_contrib"]), float(decomp["dur_contrib"]), False))
    g0 = float(decomp["g0"])
    rows.append(("feature", "baseline", 0.0, g0, True))
    level = g0
    for f in FEATURES:
        v = float(decomp["feature_contribs"][f])
        rows.append(("feature", f, level - v, v, False))
        level -= v
    rows.append(("feature", "equal_ease", 0.0, float(decomp["g_cf"]), True))
    return pd.DataFrame(rows, columns=["panel", "step", "start", "value", "is_total"])


def _summary_h1(fig2: pd.DataFrame) -> dict:
    ert = fig2[fig2["pathway"] == "ert"].set_index(["group", "feature"])
    out = {"contrasts": fig2.to_dict(orient="records")}
    checks = {}
    for g in GROUPS:
        d = {f: float(ert.loc[(g, f), "delta"]) for f in FEATURES}
        checks[g] = {
            "length_positive": d["length"] > 0,
            "zipf_negative": d["zipf"] < 0,
            "surprisal_positive": d["surprisal"] > 0,
            "magnitude_order": abs(d["length"]) > abs(d["zipf"]) > abs(d["surprisal"]),
        }
    out["checks"] = checks
    return out


def _summary_h2(fig3: pd.DataFrame) -> dict:
    sr = fig3.set_index(["pathway", "feature"])["sr"]
    ert = {f: float(sr.loc[("ert", f)]) for f in FEATURES}
    return {
        "slope_ratios": fig3.to_dict(orient="records"),
        "checks": {
            "ert_all_above_one": all(v > 1 for v in ert.values()),
            "surprisal_largest": ert["surprisal"] == max(ert.values()),
            "skip_length_below_one": float(sr.loc[("skip", "length")]) < 1,
            "skip_zipf_below_one": float(sr.loc[("skip", "zipf")]) < 1,
        },
    }


def _summary_h3(decomp: Mapping, boot: pd.DataFrame | None) -> dict:
    total = float(decomp["common_gap"])
    out = {
        "g0": decomp["g0"],
        "g_cf": decomp["g_cf"],
        "reduction": decomp["reduction"],
        "skip_contrib": decomp["skip_contrib"],
        "dur_contrib": decomp["dur_contrib"],
        "duration_share": float(decomp["dur_contrib"]) / total if total else math.nan,
        "common_gap": total,
        "feature_contribs": decomp["feature_contribs"],
        "feature_contribs_normalized": decomp["feature_contribs_normalized"],
        "raw_feature_sum": decomp.get("raw_feature_sum"),
        "attribution_mode": decomp["attribution_mode"],
        "corpus": decomp["corpus"],
    }
    if boot is not None:
        b = boot.set_index("statistic")
        out["intervals"] = {
            k: {"ci_low": b.loc[k, "ci_low"], "ci_high": b.loc[k, "ci_high"], "p": b.loc[k, "p"]}
            for k in b.index if k.startswith("gap/") or k.startswith("attr/")
        }
    return out


def report_stage(cfg: RunConfig, layout: Layout) -> dict:
    """Assemble figure data, plots, per-hypothesis summaries and (for synthetic input) recovery."""
    table = load_tokens(layout)
    stats, bins, pre = load_preprocess(layout, cfg)
    models = load_models(layout, cfg)
    decomp = read_record(layout, "decomp", "decomposition.json", cfg)
    boot = None
    if layout.path("bootstrap", "bootstrap.tsv").exists():
        boot = read_table(layout.path("bootstrap", "bootstrap.tsv"))
    else:
        logger.warning("no bootstrap results at %s; intervals left empty", layout.path("bootstrap", "bootstrap.tsv"))

    fig1 = partial_effects(models, table, stats.means)
    write_table(fig1, layout.output("report", "fig1_partial_effects.tsv"), cfg.hash)

    contrasts = contrast_table(models, stats, bins)
    ids = [f"delta/{r.pathway}/{r.group}/{r.feature}" for r in contrasts.itertuples()]
    fig2 = _with_ci(contrasts[["group", "feature", "pathway", "q1", "q3", "delta"]], boot, ids)
    write_table(fig2, layout.output("report", "fig2_contrasts.tsv"), cfg.hash)

    srs = slope_ratio_table(models, stats, bins)
    ids = [f"sr/{r.pathway}/{r.feature}" for r in srs.itertuples()]
    fig3 = _with_ci(srs[["pathway", "feature", "sr", "abs_delta_dyslexic", "abs_delta_control", "ratio_of_deltas"]],
                    boot, ids)
    write_table(fig3, layout.output("report", "fig3_slope_ratios.tsv"), cfg.hash)

    fig4 = waterfall(decomp)
    write_table(fig4, layout.output("report", "fig4_gap_waterfall.tsv"), cfg.hash)
    attr_path = layout.path("decomp", "attribution.tsv")
    if attr_path.exists():
        write_table(read_table(attr_path), layout.output("report", "fig4_attribution.tsv"), cfg.hash)

    _plots(fig1, fig2, fig3, fig4, layout)

    summaries = {"h1": _summary_h1(fig2), "h2": _summary_h2(fig3), "h3": _summary_h3(decomp, boot)}
    for name, rec in summaries.items():
        write_record(rec, layout.output("report", f"summary_{name}.json"), cfg.hash)
    diag_path = layout.path("models", "diagnostics.tsv")
    if diag_path.exists():
        diag = read_table(diag_path)
        write_record({"models": diag.to_dict(orient="records")},
                     layout.output("report", "summary_models.json"), cfg.hash)

    result = {"summaries": sorted(summaries)}
    if layout.truth.exists() and Path(pre.get("source", "")).resolve() == layout.synth_tokens.resolve():
        truth = read_record(layout, "synth", "truth.json")
        estimates = HeadlineStatistics(models, table, n_bins=cfg.n_bins, corpus=cfg.shapley_corpus)(table)
        rec = recovery_table(truth["targets"], estimates, cfg)
        write_table(rec, layout.output("report", "recovery.tsv"), cfg.hash)
        decisive = rec[rec["decisive"]]
        status = "PASS" if bool(decisive["within"].all()) else "FAIL"
        write_record({
            "status": status,
            "decisive": decisive["statistic"].tolist(),
            "failed": decisive.loc[~decisive["within"], "statistic"].tolist(),
            "informational_outside": rec.loc[~rec["decisive"] & ~rec["within"], "statistic"].tolist(),
            "truth_config_hash": truth.get("config_hash"),
        }, layout.output("report", "recovery.json"), cfg.hash)
        logger.info("synthetic recovery: %s", status)
        result["recovery"] = status
    return result
