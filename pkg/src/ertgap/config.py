"""Run configuration: a flat YAML mapping with documented defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ValidationError
from .gam import CONSTRAINTS
from .modeling import DEFAULT_CONSTRAINTS, ModelConfig
from .selection import DEFAULT_GRID
from .synth import PRESETS
from .util import config_hash


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run. Keys in a config file must match these field names."""

    # paths
    tokens_path: str | None = None
    frequency_paths: tuple[str, ...] = ()
    word_spans_path: str | None = None
    subtoken_scores_path: str | None = None
    out_dir: str = "out"
    # preprocessing
    trim_rule: str = "pooled"
    trim_sd: float = 3.0
    quantile_type: int = 7
    n_bins: int = 7
    lexicon_min_count: int = 2
    lexicon_max_types: int = 1_500_000
    # models
    n_splines: int = 20
    spline_degree: int = 3
    penalty_order: int = 2
    lambda_grid: tuple[float, ...] = DEFAULT_GRID
    constraint_skip_length: str = DEFAULT_CONSTRAINTS["skip"]["length"]
    constraint_skip_zipf: str = DEFAULT_CONSTRAINTS["skip"]["zipf"]
    constraint_skip_surprisal: str = DEFAULT_CONSTRAINTS["skip"]["surprisal"]
    constraint_duration_length: str = DEFAULT_CONSTRAINTS["duration"]["length"]
    constraint_duration_zipf: str = DEFAULT_CONSTRAINTS["duration"]["zipf"]
    constraint_duration_surprisal: str = DEFAULT_CONSTRAINTS["duration"]["surprisal"]
    tensor_n_splines: int = 5
    # cross-validation
    cv_k_stage1: int = 5
    cv_k_validate: int = 10
    cv_subsample: float = 0.5
    cv_seed: int = 0
    # bootstrap
    bootstrap_b: int = 3000
    bootstrap_seed: int = 0
    bootstrap_hold_fixed: bool = False
    bootstrap_jobs: int = 1
    # decomposition
    shapley_corpus: str = "common"
    attribution_mode: str = "single"
    attribution_configs: str = "all"
    # synthetic data
    synth_preset: str = "paper_shaped"
    synth_seed: int = 0
    synth_n_control: int = 40
    synth_n_dyslexic: int = 20
    synth_tokens_per_subject: int = 5000
    # recovery tolerances
    recovery_rel_tol: float = 0.15
    recovery_abs_tol_ms: float = 2.0
    recovery_abs_below_ms: float = 15.0

    def __post_init__(self):
        _check(self)

    def model_config(self) -> ModelConfig:
        cons = {
            pw: {f: getattr(self, f"constraint_{pw}_{f}") for f in ("length", "zipf", "surprisal")}
            for pw in ("skip", "duration")
        }
        return ModelConfig(
            n_splines=self.n_splines,
            spline_degree=self.spline_degree,
            penalty_order=self.penalty_order,
            grid=tuple(self.lambda_grid),
            constraints=cons,
            k_stage1=self.cv_k_stage1,
            k_validate=self.cv_k_validate,
            subsample_fraction=self.cv_subsample,
            cv_seed=self.cv_seed,
            tensor_n_splines=(self.tensor_n_splines, self.tensor_n_splines),
        )

    def as_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @property
    def hash(self) -> str:
        return config_hash(self.as_dict())

    def with_overrides(self, **overrides) -> "RunConfig":
        return from_mapping({**self.as_dict(), **{k: v for k, v in overrides.items() if v is not None}})


_CHOICES = {
    "trim_rule": ("pooled", "per_group"),
    "shapley_corpus": ("common", "control"),
    "attribution_mode": ("single", "shapley"),
    "attribution_configs": ("all", "additive"),
    "synth_preset": PRESETS,
}


def _check(cfg: RunConfig) -> None:
    for key, allowed in _CHOICES.items():
        if getattr(cfg, key) not in allowed:
            raise ValidationError(f"{key}={getattr(cfg, key)!r}; expected one of {list(allowed)}")
    for pw in ("skip", "duration"):
        for f in ("length", "zipf", "surprisal"):
            v = getattr(cfg, f"constraint_{pw}_{f}")
            if v not in CONSTRAINTS:
                raise ValidationError(f"constraint_{pw}_{f}={v!r}; expected one of {list(CONSTRAINTS)}")
    if cfg.quantile_type != 7:
        raise ValidationError("only quantile_type 7 (linear interpolation) is supported")
    if cfg.trim_sd <= 0:
        raise ValidationError("trim_sd must be positive")
    if not cfg.lambda_grid or any(v <= 0 for v in cfg.lambda_grid):
        raise ValidationError("lambda_grid must hold positive values")
    if not 0 < cfg.cv_subsample <= 1:
        raise ValidationError("cv_subsample must be in (0, 1]")
    for key in ("n_bins", "n_splines", "cv_k_stage1", "cv_k_validate", "bootstrap_jobs",
                "synth_n_control", "synth_n_dyslexic", "synth_tokens_per_subject", "tensor_n_splines"):
        if getattr(cfg, key) < 1:
            raise ValidationError(f"{key} must be positive")
    if cfg.bootstrap_b < 40:
        raise ValidationError("bootstrap_b must be at least 40")


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, tuple):
        if isinstance(value, (str, bytes)) or not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(float(v) if name == "lambda_grid" else str(v) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{name} must be true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ValidationError(f"{name} must be an integer")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ValidationError(f"{name} must be an integer") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ValidationError(f"{name} must be a number") from None
    if value is None:
        return None
    return str(value)


def from_mapping(values: Mapping[str, Any]) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    defaults = RunConfig()
    kwargs = {k: _coerce(k, v, getattr(defaults, k)) for k, v in values.items()}
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    """Read a flat YAML file; an absent path gives the defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ValidationError(f"{p}: not valid YAML ({exc})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError(f"{p}: expected a mapping of keys to values")
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ValidationError(f"{p}: config is flat; nested sections {nested} are not allowed")
    return from_mapping(data)


def dump_config(cfg: RunConfig) -> str:
    data = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.as_dict().items()}
    return yaml.safe_dump(data, sort_keys=True)
