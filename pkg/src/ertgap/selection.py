"""Subject-wise cross-validation and smoothing-parameter selection."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import NumericalError, ValidationError
from .gam import FittedGAM, SmoothSpec, TensorSpec, fit, linear_predictor
from .metrics import auc, rmse

logger = logging.getLogger(__name__)

DEFAULT_GRID = tuple(float(v) for v in np.logspace(-3, 5, 9))

# which column is the response for each family, and how CV scores are read
RESPONSE = {"binomial_logit": "skip", "gaussian_log": "trt_ms"}
HIGHER_IS_BETTER = {"binomial_logit": True, "gaussian_log": False}


@dataclass(frozen=True)
class CVPlan:
    k: int
    folds: Mapping[str, int]
    subjects: tuple[str, ...]
    grid: tuple[float, ...] = DEFAULT_GRID
    seed: int = 0

    def fold_subjects(self, fold: int) -> tuple[str, ...]:
        return tuple(s for s in self.subjects if self.folds[s] == fold)

    def train_test(self, fold: int) -> tuple[set[str], set[str]]:
        test = set(self.fold_subjects(fold))
        return set(self.subjects) - test, test


def group_kfold(subjects: Sequence[str], k: int, seed: int = 0,
                grid: Sequence[float] = DEFAULT_GRID) -> CVPlan:
    """Shuffle subjects with ``seed`` and deal them round-robin into ``k`` folds."""
    if k < 2:
        raise ValidationError("k must be at least 2")
    uniq = sorted(set(str(s) for s in subjects))
    if len(uniq) < k:
        raise ValidationError(f"{len(uniq)} subjects cannot fill {k} folds")
    grid = tuple(sorted(float(g) for g in grid))
    if not grid or any(g <= 0 for g in grid):
        raise ValidationError("lambda grid must be non-empty and positive")
    order = np.random.default_rng(seed).permutation(len(uniq))
    folds = {uniq[j]: i % k for i, j in enumerate(order)}
    return CVPlan(k=k, folds=folds, subjects=tuple(uniq), grid=grid, seed=seed)


def subsample_subjects(subjects: Sequence[str], fraction: float, seed: int, min_count: int = 2) -> tuple[str, ...]:
    uniq = sorted(set(str(s) for s in subjects))
    n = max(min_count, int(round(fraction * len(uniq))))
    n = min(n, len(uniq))
    pick = np.random.default_rng(seed).choice(len(uniq), size=n, replace=False)
    return tuple(sorted(uniq[i] for i in pick))


def one_se_choice(grid: Sequence[float], means: Sequence[float], ses: Sequence[float],
                  higher_is_better: bool) -> int:
    """Index of the largest lambda whose mean score is within one SE of the best."""
    m = np.asarray(means, dtype=float)
    se = np.asarray(ses, dtype=float)
    ok = np.isfinite(m)
    if not ok.any():
        raise NumericalError("no grid point produced a score")
    if higher_is_better:
        best = int(np.nanargmax(np.where(ok, m, -np.inf)))
        within = ok & (m >= m[best] - np.nan_to_num(se[best]))
    else:
        best = int(np.nanargmin(np.where(ok, m, np.inf)))
        within = ok & (m <= m[best] + np.nan_to_num(se[best]))
    g = np.asarray(grid, dtype=float)
    cand = np.flatnonzero(within)
    return int(cand[np.argmax(g[cand])])


@dataclass(frozen=True)
class GridPoint:
    lam: float
    mean: float
    se: float
    n_folds: int
    chosen: bool = False


@dataclass(frozen=True)
class SelectionResult:
    family: str
    lam: float
    points: tuple[GridPoint, ...]
    target: str = "smooths"
    frozen: bool = True

    def records(self) -> list[dict]:
        return [
            {"lambda": p.lam, "mean_score": p.mean, "se": p.se, "n_folds": p.n_folds,
             "chosen": p.chosen, "target": self.target}
            for p in self.points
        ]


@dataclass(frozen=True)
class ValidationMetrics:
    family: str
    lam: float
    metric: str
    fold_scores: tuple[float, ...]
    mean: float
    skipped_folds: tuple[int, ...] = ()


def _model_frame(data: pd.DataFrame, family: str) -> pd.DataFrame:
    if family == "gaussian_log":
        return data[data["skip"] == 0]
    return data


def _score(family: str, model: FittedGAM, test: pd.DataFrame) -> float:
    eta = linear_predictor(model, test)
    if family == "binomial_logit":
        return auc(test["skip"].to_numpy(), eta)
    # log-scale RMSE of the log-TRT fit
    return rmse(np.log(test["trt_ms"].to_numpy()), eta)


def _apply_lam(specs, tensors, lam, target):
    if target == "smooths":
        return [s.with_lam(lam) for s in specs], list(tensors)
    return list(specs), [t.with_lam(lam) for t in tensors]


def cv_scores(
    family: str,
    specs: Sequence[SmoothSpec],
    data: pd.DataFrame,
    plan: CVPlan,
    lams: Sequence[float],
    tensors: Sequence[TensorSpec] = (),
    target: str = "smooths",
) -> np.ndarray:
    """Score matrix ``(len(lams), k)``; NaN marks failed or skipped folds.

    Within a fold the lambdas run from largest to smallest with warm starts.
    """
    frame = _model_frame(data, family)
    frame = frame[frame["subject_id"].isin(plan.subjects)]
    resp = RESPONSE[family]
    out = np.full((len(lams), plan.k), np.nan)
    order = np.argsort(lams)[::-1]
    for fold in range(plan.k):
        train_s, test_s = plan.train_test(fold)
        train = frame[frame["subject_id"].isin(train_s)]
        test = frame[frame["subject_id"].isin(test_s)]
        if len(test) == 0:
            continue
        if family == "binomial_logit" and test["skip"].nunique() < 2:
            warnings.warn(f"fold {fold}: test set has a single skip class; skipped")
            continue
        prev = None
        for i in order:
            sp, tp = _apply_lam(specs, tensors, lams[i], target)
            try:
                model = fit(family, sp, train, train[resp].to_numpy(), tp, warm_start=prev)
            except (NumericalError, ValidationError) as exc:
                logger.warning("fold %d lambda %g failed: %s", fold, lams[i], exc)
                continue
            prev = model
            out[i, fold] = _score(family, model, test)
    return out


def grid_search(
    family: str,
    specs: Sequence[SmoothSpec],
    data: pd.DataFrame,
    plan: CVPlan,
    tensors: Sequence[TensorSpec] = (),
    target: str = "smooths",
) -> SelectionResult:
    """Pick one shared lambda by grouped CV and the 1-SE rule.

    ``target`` chooses whether the grid lambda goes to the main smooths or
    to the tensor terms (the other set keeps the lambdas in its specs).
    """
    if target not in ("smooths", "tensors"):
        raise ValueError(target)
    lams = list(plan.grid)
    scores = cv_scores(family, specs, data, plan, lams, tensors, target)
    means, ses, counts = [], [], []
    for i, lam in enumerate(lams):
        row = scores[i][np.isfinite(scores[i])]
        counts.append(int(row.size))
        if row.size == 0:
            warnings.warn(f"lambda={lam:g}: every fold failed; grid point skipped")
            means.append(math.nan)
            ses.append(math.nan)
            continue
        means.append(float(row.mean()))
        ses.append(float(row.std(ddof=1) / math.sqrt(row.size)) if row.size > 1 else 0.0)
    if all(c == 0 for c in counts):
        raise NumericalError("every grid point failed")
    idx = one_se_choice(lams, means, ses, HIGHER_IS_BETTER[family])
    points = tuple(
        GridPoint(lam=lams[i], mean=means[i], se=ses[i], n_folds=counts[i], chosen=(i == idx))
        for i in range(len(lams))
    )
    logger.info("%s: lambda=%g chosen (%s)", family, lams[idx], target)
    return SelectionResult(family=family, lam=lams[idx], points=points, target=target)


def validate(
    family: str,
    specs: Sequence[SmoothSpec],
    selection: SelectionResult,
    data: pd.DataFrame,
    plan: CVPlan,
    tensors: Sequence[TensorSpec] = (),
) -> tuple[ValidationMetrics, FittedGAM]:
    """Grouped CV with the frozen lambda, then a refit on all rows."""
    if not selection.frozen:
        raise ValidationError("validate needs a frozen selection")
    lam = selection.lam
    scores = cv_scores(family, specs, data, plan, [lam], tensors, selection.target)[0]
    skipped = tuple(int(i) for i in np.flatnonzero(~np.isfinite(scores)))
    good = scores[np.isfinite(scores)]
    if good.size == 0:
        raise NumericalError("no validation fold produced a score")
    metrics = ValidationMetrics(
        family=family,
        lam=lam,
        metric="auc" if family == "binomial_logit" else "rmse_log",
        fold_scores=tuple(float(s) for s in scores),
        mean=float(good.mean()),
        skipped_folds=skipped,
    )
    frame = _model_frame(data, family)
    sp, tp = _apply_lam(specs, tensors, lam, selection.target)
    final = fit(family, sp, frame, frame[RESPONSE[family]].to_numpy(), tp)
    return metrics, final
