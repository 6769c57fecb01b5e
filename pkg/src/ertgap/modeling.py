"""Two-stage fitting of the four group-specific models (skip and duration per group)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import pandas as pd

from .corpus import FEATURES, GROUPS, TokenTable
from .errors import ValidationError
from .gam import FittedGAM, SmoothSpec, TensorSpec, fit
from .selection import (
    DEFAULT_GRID,
    RESPONSE,
    CVPlan,
    SelectionResult,
    ValidationMetrics,
    grid_search,
    group_kfold,
    subsample_subjects,
    validate,
)

logger = logging.getLogger(__name__)

PATHWAY_FAMILY = {"skip": "binomial_logit", "duration": "gaussian_log"}

# zipf raises skipping and shortens fixations
DEFAULT_CONSTRAINTS = {
    "skip": {"length": "none", "zipf": "monotone_inc", "surprisal": "none"},
    "duration": {"length": "none", "zipf": "monotone_dec", "surprisal": "none"},
}

INTERACTIONS = (("length", "zipf"), ("length", "surprisal"), ("zipf", "surprisal"))


@dataclass(frozen=True)
class ModelConfig:
    n_splines: int = 20
    spline_degree: int = 3
    penalty_order: int = 2
    grid: tuple[float, ...] = DEFAULT_GRID
    constraints: Mapping[str, Mapping[str, str]] = field(default_factory=lambda: DEFAULT_CONSTRAINTS)
    k_stage1: int = 5
    k_validate: int = 10
    subsample_fraction: float = 0.5
    cv_seed: int = 0
    tensor_n_splines: tuple[int, int] = (5, 5)
    tensor_lam: float | None = None  # None: select by the stage-1 grid

    def specs(self, pathway: str, lam: float = 1.0) -> list[SmoothSpec]:
        cons = self.constraints[pathway]
        return [
            SmoothSpec(f, self.n_splines, self.spline_degree, lam, cons.get(f, "none"), self.penalty_order)
            for f in FEATURES
        ]

    def tensors(self, interactions: Sequence[tuple[str, str]], lam: float = 1.0) -> list[TensorSpec]:
        return [TensorSpec(tuple(pair), self.tensor_n_splines, lam, self.spline_degree, self.penalty_order)
                for pair in interactions]


@dataclass(frozen=True)
class GroupModels:
    skip: FittedGAM
    duration: FittedGAM


@dataclass(frozen=True)
class FitRecord:
    group: str
    pathway: str
    selection: SelectionResult
    validation: ValidationMetrics | None
    tensor_selection: SelectionResult | None = None


@dataclass(frozen=True)
class FitBundle:
    models: Mapping[str, GroupModels]
    records: tuple[FitRecord, ...]
    interactions: tuple[tuple[str, str], ...] = ()


def group_data(table: TokenTable, group: str) -> pd.DataFrame:
    frame = table.complete().group_frame(group)
    if len(frame) == 0:
        raise ValidationError(f"no complete tokens for group {group!r}")
    return frame


def fit_one(
    data: pd.DataFrame,
    pathway: str,
    config: ModelConfig,
    interactions: Sequence[tuple[str, str]] = (),
    frozen_lam: float | None = None,
    validate_model: bool = True,
) -> tuple[FittedGAM, FitRecord]:
    """Stage-1 grid search (unless ``frozen_lam``), stage-2 validation, final refit."""
    family = PATHWAY_FAMILY[pathway]
    group = str(data["group"].iloc[0])
    subjects = sorted(data["subject_id"].unique())
    k1, k2 = config.k_stage1, config.k_validate
    if len(subjects) < max(k1, k2) and validate_model:
        raise ValidationError(
            f"{group}: {len(subjects)} subjects cannot support {max(k1, k2)}-fold grouped CV"
        )
    specs = config.specs(pathway)
    if frozen_lam is None:
        sub = subsample_subjects(subjects, config.subsample_fraction, config.cv_seed, min_count=k1)
        plan1 = group_kfold(sub, k1, config.cv_seed, config.grid)
        selection = grid_search(family, specs, data, plan1)
    else:
        selection = SelectionResult(family=family, lam=float(frozen_lam), points=())
    specs = [s.with_lam(selection.lam) for s in specs]

    tensor_sel = None
    tensors: list[TensorSpec] = []
    if interactions:
        if config.tensor_lam is not None:
            tensors = config.tensors(interactions, config.tensor_lam)
        else:
            sub = subsample_subjects(subjects, config.subsample_fraction, config.cv_seed, min_count=k1)
            plan1 = group_kfold(sub, k1, config.cv_seed, config.grid)
            tensor_sel = grid_search(family, specs, data, plan1, config.tensors(interactions), target="tensors")
            tensors = config.tensors(interactions, tensor_sel.lam)

    metrics = None
    if validate_model:
        plan2 = group_kfold(subjects, k2, config.cv_seed, config.grid)
        frozen = SelectionResult(family=family, lam=selection.lam, points=selection.points)
        metrics, model = validate(family, specs, frozen, data, plan2, tensors)
    else:
        frame = data[data["skip"] == 0] if family == "gaussian_log" else data
        model = fit(family, specs, frame, frame[RESPONSE[family]].to_numpy(), tensors)
    rec = FitRecord(group=group, pathway=pathway, selection=selection,
                    validation=metrics, tensor_selection=tensor_sel)
    return model, rec


def fit_all(
    table: TokenTable,
    config: ModelConfig,
    interactions: Sequence[tuple[str, str]] = (),
    frozen_lams: Mapping[tuple[str, str], float] | None = None,
    validate_model: bool = True,
) -> FitBundle:
    models: dict[str, dict[str, FittedGAM]] = {}
    records = []
    for g in GROUPS:
        data = group_data(table, g)
        for pathway in ("skip", "duration"):
            lam = None if frozen_lams is None else frozen_lams.get((g, pathway))
            model, rec = fit_one(data, pathway, config, interactions, lam, validate_model)
            models.setdefault(g, {})[pathway] = model
            records.append(rec)
            logger.info("fitted %s/%s (lambda=%g)", g, pathway, rec.selection.lam)
    return FitBundle(
        models={g: GroupModels(m["skip"], m["duration"]) for g, m in models.items()},
        records=tuple(records),
        interactions=tuple(tuple(p) for p in interactions),
    )


def plan_for(table: TokenTable, k: int, seed: int, grid=DEFAULT_GRID) -> CVPlan:
    return group_kfold(table.subjects, k, seed, grid)
