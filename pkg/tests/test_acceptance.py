"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Criteria 1 to 10 need no external data. Criteria 11 to 15 run only when the
environment variable ``ERTGAP_COPCO_TOKENS`` names a token TSV in the ingest
format built from the CopCo corpus; ``ERTGAP_COPCO_CONFIG`` may name a YAML
run config to go with it.
"""

import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

import conftest
from conftest import token_frame
from ertgap import cli, pipeline
from ertgap.corpus import GROUPS, TokenTable
from ertgap.effects import ert
from ertgap.gam import SmoothSpec, basis_eval, design_matrix, fit, linear_predictor, make_knots, penalty_matrix
from ertgap.gam import predict_trt_ms
from ertgap.gapdecomp import attribute_features, decompose
from ertgap.inference import bootstrap, bootstrap_p, draw_subjects, resample_table
from ertgap.metrics import auc
from ertgap.selection import group_kfold
from test_gam import cox_de_boor, newton_logistic
from test_metrics_selection import pair_count_auc

COPCO_TOKENS = os.environ.get("ERTGAP_COPCO_TOKENS")
COPCO_CONFIG = os.environ.get("ERTGAP_COPCO_CONFIG")
needs_copco = pytest.mark.skipif(not COPCO_TOKENS, reason="set ERTGAP_COPCO_TOKENS to a CopCo-formatted token TSV")


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


def _run(args: list[str]) -> None:
    code = cli.main(args)
    assert code == 0, f"ertgap {' '.join(args)} exited with {code}"


@pytest.fixture(scope="module")
def synth_run(tmp_path_factory):
    """Full pipeline on the default `paper_shaped` synthetic corpus (40 + 20 subjects, 5000 tokens each)."""
    out = tmp_path_factory.mktemp("synth_run")
    _run(["synth", "--out", str(out), "--seed", "0"])
    _run(["run", "--out", str(out), "--skip-bootstrap"])
    return pipeline.Layout(out)


def test_criterion_01_ert_identity():
    rng = np.random.default_rng(11)
    p = rng.uniform(0, 1, 100_000)
    t = rng.uniform(0, 3000, 100_000)
    exact = bool(np.array_equal(ert(p, t), (1 - p) * t))
    edges = bool(np.all(ert(np.ones(1000), t[:1000]) == 0) and np.array_equal(ert(np.zeros(1000), t[:1000]), t[:1000]))
    verdict(1, exact and edges, f"identity exact={exact}, endpoints exact={edges}")


def test_criterion_02_spline_core():
    rng = np.random.default_rng(12)
    x = rng.uniform(-2, 9, 10_000)
    knots = make_knots(x, 20, 3)
    unity = float(np.max(np.abs(basis_eval(knots, 3, x).sum(axis=1) - 1.0)))
    pts = rng.uniform(x.min(), x.max(), 300)
    cdb = float(np.max(np.abs(basis_eval(knots, 3, pts) - np.array([cox_de_boor(knots, 3, v) for v in pts]))))
    pen = penalty_matrix(20, 2)
    null = bool(np.all(pen @ np.ones(20) == 0) and np.all(pen @ np.arange(20.0) == 0))
    ok = unity < 1e-12 and cdb < 1e-10 and null
    verdict(2, ok, f"unity error {unity:.2e}, Cox-de Boor error {cdb:.2e}, penalty null space exact={null}")


def test_criterion_03_solver_oracles():
    rng = np.random.default_rng(13)
    x = rng.uniform(0, 10, 500)
    y = (rng.random(500) < expit(np.sin(x / 2) - 0.2)).astype(float)
    model = fit("binomial_logit", [SmoothSpec("x", n_splines=6, lam=1e-9)], {"x": x}, y)
    b = basis_eval(make_knots(x, 6, 3), 3, x)
    design = np.column_stack([np.ones(500), b[:, 1:]])
    logit_err = float(np.max(np.abs(linear_predictor(model, {"x": x}) - design @ newton_logistic(design, y))))

    z = rng.uniform(0, 5, 500)
    t = np.exp(5 + 0.3 * np.cos(z) + rng.normal(0, 0.2, 500))
    lam = 2.5
    ridge = fit("gaussian_log", [SmoothSpec("z", n_splines=8, lam=lam, penalty_order=0)], {"z": z}, t)
    xm = design_matrix(ridge, {"z": z})
    pen = np.zeros((9, 9))
    pen[1:, 1:] = lam * np.eye(8)
    closed = np.linalg.solve(xm.T @ xm + pen, xm.T @ np.log(t))
    ridge_err = float(np.max(np.abs(ridge.coefficients - closed)))
    verdict(3, logit_err < 1e-6 and ridge_err < 1e-8,
            f"logistic vs Newton {logit_err:.2e}, ridge vs closed form {ridge_err:.2e}")


def test_criterion_04_monotonicity(synth_run):
    models = pipeline.load_models(synth_run)
    table = pipeline.load_tokens(synth_run)
    worst = 0.0
    checked = []
    for g in GROUPS:
        for pw in ("skip", "duration"):
            model = getattr(models[g], pw)
            for smooth in model.smooths:
                spec = smooth.spec
                if spec.constraint == "none":
                    continue
                sign = 1.0 if spec.constraint == "monotone_inc" else -1.0
                col = table.frame[spec.feature]
                grid = np.linspace(col.min(), col.max(), 512)
                d = sign * np.diff(smooth(grid))
                worst = max(worst, float(max(0.0, -d.min())))
                checked.append(f"{g}/{pw}/{spec.feature}")
    verdict(4, bool(checked) and worst < 1e-8, f"{len(checked)} constrained smooths, worst violation {worst:.2e}")


def test_criterion_05_smearing():
    rng = np.random.default_rng(15)
    n, mu, sigma = 50_000, 5.4, 0.5
    x = rng.uniform(0, 1, n)
    t = np.exp(mu + sigma * rng.standard_normal(n))
    model = fit("gaussian_log", [SmoothSpec("x", n_splines=10, lam=10.0)], {"x": x}, t)
    target = math.exp(mu + sigma ** 2 / 2)
    rel = abs(float(predict_trt_ms(model, {"x": x}).mean()) / target - 1)
    verdict(5, rel < 0.02, f"relative error {rel:.4f} against exp(mu + sigma^2/2)")


def test_criterion_06_auc_oracle():
    rng = np.random.default_rng(16)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 50))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = rng.integers(0, 8, n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        mismatches += int(auc(y, s) != pair_count_auc(y, s))
    verdict(6, mismatches == 0, f"{mismatches} of 200 instances differ from pair counting")


def test_criterion_07_recovery(synth_run):
    rec = json.loads(synth_run.path("report", "recovery.json").read_text())
    table = pipeline.read_table(synth_run.path("report", "recovery.tsv"))
    decisive = table[table["decisive"].astype(str) == "True"]
    worst = decisive.assign(margin=decisive["error"].abs() / decisive["tolerance"]).sort_values("margin").iloc[-1]
    for row in decisive.itertuples():
        print(f"  {row.statistic}: target {row.target:.4g}, estimate {row.estimate:.4g}, within={row.within}")
    verdict(7, rec["status"] == "PASS",
            f"{len(decisive)} decisive targets, failed {rec['failed']}, "
            f"tightest {worst['statistic']} at {worst['margin']:.2f} of tolerance")


def test_criterion_08_decomposition_exactness(synth_run):
    table = pipeline.load_tokens(synth_run)
    stats, bins, _ = pipeline.load_preprocess(synth_run)
    models = pipeline.load_models(synth_run)
    dec = decompose(models, table, stats, bins)
    split = abs(dec.skip_contrib + dec.dur_contrib - dec.common_gap)
    split_tol = 1e-12 * max(1.0, abs(dec.common_gap))
    ca = attribute_features(models, table, stats, bins)
    joint = ca.joint_reduction
    norm_rel = abs(sum(ca.normalized.values()) - joint) / abs(joint)
    shap_rel = abs(sum(ca.shapley.values()) - joint) / abs(joint)
    raw_rel = abs(sum(ca.single.values()) - joint) / abs(joint)
    ok = split <= split_tol and norm_rel <= 1e-9 and shap_rel <= 1e-9
    verdict(8, ok, f"pathway split residual {split:.1e} ms; additive feature sums vs joint: "
                   f"normalized {norm_rel:.1e}, Shapley {shap_rel:.1e} (raw single clamps {raw_rel:.1e}, informational)")


def test_criterion_09_bootstrap():
    floor = bootstrap_p(np.full(3000, 5.0), 0.0)
    floor_ok = floor == 2 / 3001 and abs(floor - 6.66e-4) < 1e-6
    table = TokenTable.from_frame(token_frame(15, subjects=("c1", "c2", "c3", "d1", "d2")))

    def stat(t):
        return float(t.fixated()["trt_ms"].mean())

    a = bootstrap(stat, table, b=200, seed=21)
    b = bootstrap(stat, table, b=200, seed=21, n_jobs=2)
    same = a == b and a.trace_hash == b.trace_hash
    rng = np.random.default_rng(21)
    sizes = True
    for _ in range(200):
        res = resample_table(table, draw_subjects(table, rng))
        sizes &= all(len(res.rosters[g]) == len(table.rosters[g]) for g in GROUPS)
    verdict(9, floor_ok and same and sizes, f"p floor {floor:.4e}, seed repeat identical={same}, group sizes kept={sizes}")


def test_criterion_10_no_leakage():
    subjects = [f"s{i:02d}" for i in range(57)]
    plan = group_kfold(subjects, 10, seed=0)
    leaks = 0
    for k in range(plan.k):
        train, test = plan.train_test(k)
        leaks += len(train & test)
    covered = set().union(*(plan.train_test(k)[1] for k in range(plan.k))) == set(subjects)
    verdict(10, leaks == 0 and covered, f"{plan.k} folds, {leaks} shared subjects, every subject tested once={covered}")


@pytest.fixture(scope="module")
def copco_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("copco_run")
    args = ["--out", str(out)] + (["--config", COPCO_CONFIG] if COPCO_CONFIG else [])
    _run(["ingest", "--tokens", str(Path(COPCO_TOKENS).resolve())] + args)
    _run(["fit"] + args)
    _run(["contrast"] + args)
    _run(["slope-ratios"] + args)
    _run(["decompose"] + args)
    return pipeline.Layout(out)


def _diagnostics(layout):
    return pipeline.read_table(layout.path("models", "diagnostics.tsv")).set_index(["group", "pathway"])


@needs_copco
def test_criterion_11_skip_auc(copco_run):
    d = _diagnostics(copco_run)
    got = {g: float(d.loc[(g, "skip"), "cv_mean"]) for g in GROUPS}
    want = {"control": 0.700, "dyslexic": 0.682}
    ok = all(abs(got[g] - want[g]) <= 0.05 for g in GROUPS)
    verdict(11, ok, ", ".join(f"{g} AUC {got[g]:.3f} vs {want[g]}" for g in GROUPS))


@needs_copco
def test_criterion_12_duration_fit(copco_run):
    d = _diagnostics(copco_run)
    r2 = {g: float(d.loc[(g, "duration"), "r2_log"]) for g in GROUPS}
    rmse = {g: float(d.loc[(g, "duration"), "cv_mean"]) for g in GROUPS}
    want_r2 = {"control": 0.089, "dyslexic": 0.066}
    want_rmse = {"control": 0.521, "dyslexic": 0.577}
    ok = all(abs(r2[g] - want_r2[g]) <= 0.04 and abs(rmse[g] - want_rmse[g]) <= 0.08 for g in GROUPS)
    verdict(12, ok, ", ".join(f"{g} R2 {r2[g]:.3f} log-RMSE {rmse[g]:.3f}" for g in GROUPS))


@needs_copco
def test_criterion_13_h1(copco_run):
    c = pipeline.read_table(copco_run.path("contrasts", "contrasts.tsv"))
    e = c[c["pathway"] == "ert"].set_index(["group", "feature"])["delta"]
    signs = all(e[(g, "length")] > 0 and e[(g, "zipf")] < 0 and e[(g, "surprisal")] > 0 for g in GROUPS)
    order = abs(e[("control", "length")]) > abs(e[("control", "zipf")]) > abs(e[("control", "surprisal")])
    verdict(13, signs and order, f"signs={signs}, control magnitude order={order}")


@needs_copco
def test_criterion_14_h2(copco_run):
    s = pipeline.read_table(copco_run.path("contrasts", "slope_ratios.tsv")).set_index(["pathway", "feature"])["sr"]
    ert_sr = {f: float(s[("ert", f)]) for f in ("length", "zipf", "surprisal")}
    ok = (all(v > 1 for v in ert_sr.values()) and ert_sr["surprisal"] == max(ert_sr.values())
          and s[("skip", "length")] < 1 and s[("skip", "zipf")] < 1)
    verdict(14, bool(ok), f"ERT SRs {ert_sr}, skip SRs length {s[('skip', 'length')]:.3f} zipf {s[('skip', 'zipf')]:.3f}")


@needs_copco
def test_criterion_15_h3(copco_run):
    rec = json.loads(copco_run.path("decomp", "decomposition.json").read_text())
    share = rec["dur_contrib"] / rec["common_gap"]
    ok = abs(rec["g0"] - 97.28) <= 15 and abs(rec["reduction"] - 30.66) <= 10 and 0.55 <= share <= 0.75
    verdict(15, ok, f"gap {rec['g0']:.2f} ms, reduction {rec['reduction']:.2f} ms, duration share {share:.3f}")
