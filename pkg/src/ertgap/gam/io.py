"""Self-describing JSON serialization of fitted models.

Floats are written with ``repr`` precision, so coefficients round-trip exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from ..errors import ValidationError
from .model import FitInfo, FittedGAM, FittedSmooth, FittedTensor, SmoothSpec, TensorSpec, _frozen

FORMAT = "ertgap.fitted_gam/1"


def model_to_record(model: FittedGAM) -> dict[str, Any]:
    return {
        "format": FORMAT,
        "family": model.family,
        "intercept": model.intercept,
        "smearing_factor": model.smearing_factor,
        "residual_n": model.residual_n,
        "residual_exp_sum": model.residual_exp_sum,
        "config_hash": model.config_hash,
        "diagnostics": dict(model.diagnostics),
        "info": {
            "iterations": model.info.iterations,
            "penalized_deviance": model.info.penalized_deviance,
            "deviance": model.info.deviance,
            "converged": model.info.converged,
            "n_obs": model.info.n_obs,
            "separated": model.info.separated,
            "active_constraints": {k: list(v) for k, v in model.info.active_constraints.items()},
        },
        "smooths": [
            {
                "feature": s.spec.feature,
                "n_splines": s.spec.n_splines,
                "spline_degree": s.spec.spline_degree,
                "lam": s.spec.lam,
                "constraint": s.spec.constraint,
                "penalty_order": s.spec.penalty_order,
                "knots": s.knots.tolist(),
                "coef": s.coef.tolist(),
            }
            for s in model.smooths
        ],
        "tensors": [
            {
                "features": list(t.spec.features),
                "n_splines": list(t.spec.n_splines),
                "lam": t.spec.lam,
                "spline_degree": t.spec.spline_degree,
                "penalty_order": t.spec.penalty_order,
                "knots": [k.tolist() for k in t.knots],
                "centers": [c.tolist() for c in t.centers],
                "coef": t.coef.tolist(),
            }
            for t in model.tensors
        ],
    }


def model_from_record(rec: dict[str, Any]) -> FittedGAM:
    if rec.get("format") != FORMAT:
        raise ValidationError(f"unsupported model format {rec.get('format')!r}")
    smooths = tuple(
        FittedSmooth(
            SmoothSpec(s["feature"], s["n_splines"], s["spline_degree"], s["lam"],
                       s["constraint"], s["penalty_order"]),
            _frozen(s["knots"]),
            _frozen(s["coef"]),
        )
        for s in rec["smooths"]
    )
    tensors = tuple(
        FittedTensor(
            TensorSpec(tuple(t["features"]), tuple(t["n_splines"]), t["lam"],
                       t["spline_degree"], t["penalty_order"]),
            tuple(_frozen(k) for k in t["knots"]),
            tuple(_frozen(c) for c in t["centers"]),
            _frozen(t["coef"]),
        )
        for t in rec["tensors"]
    )
    info = rec["info"]
    return FittedGAM(
        family=rec["family"],
        intercept=rec["intercept"],
        smooths=smooths,
        tensors=tensors,
        info=FitInfo(
            iterations=info["iterations"],
            penalized_deviance=info["penalized_deviance"],
            deviance=info["deviance"],
            converged=info["converged"],
            n_obs=info["n_obs"],
            active_constraints={k: tuple(v) for k, v in info["active_constraints"].items()},
            separated=info.get("separated", False),
        ),
        smearing_factor=rec["smearing_factor"],
        residual_n=rec["residual_n"],
        residual_exp_sum=rec["residual_exp_sum"],
        diagnostics=rec["diagnostics"],
        config_hash=rec["config_hash"],
    )


def dumps(model: FittedGAM) -> str:
    return json.dumps(model_to_record(model), indent=1)


def loads(text: str) -> FittedGAM:
    return model_from_record(json.loads(text))


def save_model(model: FittedGAM, path: str | Path) -> None:
    Path(path).write_text(dumps(model) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> FittedGAM:
    return loads(Path(path).read_text(encoding="utf-8"))
