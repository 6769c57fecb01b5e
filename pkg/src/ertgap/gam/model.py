"""Penalized additive models fit by PIRLS, with monotone shape constraints.

The linear predictor is ``intercept + sum_j f_j(x_j) + sum_k t_k(x_a, x_b)``
where each ``f_j`` is a P-spline and each ``t_k`` a tensor-product
interaction built from sum-to-zero marginals.  Two families are supported:

``binomial_logit``
    Bernoulli response (1 = skipped), logit link.
``gaussian_log``
    Positive response (TRT in ms) modelled as Gaussian on the log scale;
    response-scale predictions use a smearing factor.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from ..errors import NumericalError, SeparationError, ValidationError
from ..metrics import auc, r_squared
from ..util import config_hash
from .basis import basis_eval, centering_basis, make_knots, penalty_matrix, row_tensor

logger = logging.getLogger(__name__)

FAMILIES = ("binomial_logit", "gaussian_log")
CONSTRAINTS = ("none", "monotone_inc", "monotone_dec")
MONOTONE_WEIGHT = 1e9
SEPARATION_ETA = 30.0

_fit_lock = threading.Lock()
_fit_counter = 0


def fit_count() -> int:
    """Number of calls to :func:`fit` in this process (used to assert frozen models)."""
    return _fit_counter


def _bump_fit_counter() -> None:
    global _fit_counter
    with _fit_lock:
        _fit_counter += 1


@dataclass(frozen=True)
class SmoothSpec:
    feature: str
    n_splines: int = 20
    spline_degree: int = 3
    lam: float = 1.0
    constraint: str = "none"
    penalty_order: int = 2

    def __post_init__(self):
        if self.n_splines < 4 or self.n_splines <= self.spline_degree:
            raise ValidationError(f"{self.feature}: need n_splines >= 4 and > degree")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValidationError(f"{self.feature}: lambda must be finite and positive")
        if self.constraint not in CONSTRAINTS:
            raise ValidationError(f"unknown constraint {self.constraint!r}")
        if self.penalty_order < 0 or self.penalty_order >= self.n_splines:
            raise ValidationError(f"{self.feature}: bad penalty order {self.penalty_order}")

    def with_lam(self, lam: float) -> "SmoothSpec":
        return SmoothSpec(self.feature, self.n_splines, self.spline_degree, lam,
                          self.constraint, self.penalty_order)


@dataclass(frozen=True)
class TensorSpec:
    features: tuple[str, str]
    n_splines: tuple[int, int] = (5, 5)
    lam: float = 1.0
    spline_degree: int = 3
    penalty_order: int = 2

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "n_splines", tuple(self.n_splines))
        if len(self.features) != 2 or self.features[0] == self.features[1]:
            raise ValidationError(f"tensor term needs two distinct features, got {self.features}")
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValidationError("tensor lambda must be finite and positive")

    @property
    def name(self) -> str:
        return f"{self.features[0]}x{self.features[1]}"

    def with_lam(self, lam: float) -> "TensorSpec":
        return TensorSpec(self.features, self.n_splines, lam, self.spline_degree, self.penalty_order)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FittedSmooth:
    spec: SmoothSpec
    knots: np.ndarray
    coef: np.ndarray

    def basis(self, x) -> np.ndarray:
        return basis_eval(self.knots, self.spec.spline_degree, x)

    def __call__(self, x) -> np.ndarray:
        return self.basis(x) @ self.coef


@dataclass(frozen=True, eq=False)
class FittedTensor:
    spec: TensorSpec
    knots: tuple[np.ndarray, np.ndarray]
    centers: tuple[np.ndarray, np.ndarray]
    coef: np.ndarray

    def basis(self, xa, xb) -> np.ndarray:
        deg = self.spec.spline_degree
        a = basis_eval(self.knots[0], deg, xa) @ self.centers[0]
        b = basis_eval(self.knots[1], deg, xb) @ self.centers[1]
        return row_tensor(a, b)

    def __call__(self, xa, xb) -> np.ndarray:
        return self.basis(xa, xb) @ self.coef


@dataclass(frozen=True)
class FitInfo:
    iterations: int
    penalized_deviance: float
    deviance: float
    converged: bool
    n_obs: int
    active_constraints: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    separated: bool = False


@dataclass(frozen=True, eq=False)
class FittedGAM:
    """An immutable fitted additive model."""

    family: str
    intercept: float
    smooths: tuple[FittedSmooth, ...]
    tensors: tuple[FittedTensor, ...]
    info: FitInfo
    smearing_factor: float = 1.0
    residual_n: int = 0
    residual_exp_sum: float = 0.0
    diagnostics: Mapping[str, float] = field(default_factory=dict)
    config_hash: str = ""

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(s.spec.feature for s in self.smooths)

    def smooth(self, feature: str) -> FittedSmooth:
        for s in self.smooths:
            if s.spec.feature == feature:
                return s
        raise ValidationError(f"model has no smooth for {feature!r}")

    @property
    def coefficients(self) -> np.ndarray:
        parts = [np.array([self.intercept])]
        parts += [s.coef for s in self.smooths]
        parts += [t.coef for t in self.tensors]
        return np.concatenate(parts)


# ---------------------------------------------------------------------------
# design construction


def _column(data: Mapping[str, Any], name: str, n: int | None = None) -> np.ndarray:
    try:
        col = data[name]
    except KeyError:
        raise ValidationError(f"data lacks feature column {name!r}") from None
    arr = np.asarray(col, dtype=float).ravel()
    if n is not None and arr.size == 1 and n > 1:
        arr = np.full(n, arr[0])
    if np.isnan(arr).any():
        raise ValidationError(f"feature {name!r} contains missing values")
    return arr


def _n_rows(data: Mapping[str, Any], names: Sequence[str]) -> int:
    return max(np.asarray(data[n]).size for n in names) if names else 0


def model_spec_hash(family: str, specs: Sequence[SmoothSpec], tensors: Sequence[TensorSpec]) -> str:
    return config_hash({"family": family, "smooths": list(specs), "tensors": list(tensors)})


def design_matrix(model: FittedGAM, data: Mapping[str, Any]) -> np.ndarray:
    names = list(model.features) + [f for t in model.tensors for f in t.spec.features]
    n = _n_rows(data, names)
    blocks = [np.ones((n, 1))]
    for s in model.smooths:
        blocks.append(s.basis(_column(data, s.spec.feature, n)))
    for t in model.tensors:
        fa, fb = t.spec.features
        blocks.append(t.basis(_column(data, fa, n), _column(data, fb, n)))
    return np.hstack(blocks)


def linear_predictor(model: FittedGAM, data: Mapping[str, Any]) -> np.ndarray:
    return design_matrix(model, data) @ model.coefficients


# ---------------------------------------------------------------------------
# solver


def _solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return linalg.cho_solve(linalg.cho_factor(a, check_finite=False), b, check_finite=False)
    except linalg.LinAlgError:
        pass
    scale = float(np.mean(np.abs(np.diag(a)))) or 1.0
    try:
        jitter = a + np.eye(a.shape[0]) * scale * 1e-10
        return linalg.cho_solve(linalg.cho_factor(jitter, check_finite=False), b, check_finite=False)
    except linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(a, b, rcond=None)
        if not np.all(np.isfinite(sol)):
            raise NumericalError("penalized normal equations are singular") from None
        return sol


def _binomial_deviance(y: np.ndarray, eta: np.ndarray) -> float:
    # -2 loglik, computed without forming mu
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


class _Problem:
    """Data, design and base penalty of one fit; solves for a given penalty/tying."""

    def __init__(self, family: str, x: np.ndarray, y: np.ndarray, penalty: np.ndarray,
                 max_iter: int, tol: float):
        self.family = family
        self.x = x
        self.y = y
        self.penalty = penalty
        self.max_iter = max_iter
        self.tol = tol
        self.n = x.shape[0]
        if family == "gaussian_log":
            self.gram = x.T @ x
            self.xty = x.T @ y

    def solve(self, penalty: np.ndarray, tie: np.ndarray | None,
              beta0: np.ndarray) -> tuple[np.ndarray, int, float, bool]:
        if tie is None:
            x, s = self.x, penalty
            g0 = beta0
        else:
            s = tie.T @ penalty @ tie
            x = None
            g0 = (tie.T @ beta0) / tie.sum(axis=0)
        if self.family == "gaussian_log":
            gram, xty = (self.gram, self.xty) if tie is None else (
                tie.T @ self.gram @ tie, tie.T @ self.xty)
            gamma = _solve_spd(gram + s, xty)
            beta = gamma if tie is None else tie @ gamma
            resid = self.y - self.x @ beta
            pdev = float(resid @ resid + beta @ penalty @ beta)
            return beta, 1, pdev, True
        if x is None:
            x = self.x @ tie
        return self._pirls_binomial(x, s, g0, tie, penalty)

    def _pirls_binomial(self, x, s, gamma, tie, penalty):
        y = self.y

        def pdev_of(g):
            eta = x @ g
            return _binomial_deviance(y, eta) + float(g @ s @ g), eta

        old, eta = pdev_of(gamma)
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            mu = expit(eta)
            w = np.clip(mu * (1.0 - mu), 1e-10, None)
            z = eta + (y - mu) / w
            xw = x * w[:, None]
            new_gamma = _solve_spd(xw.T @ x + s, xw.T @ z)
            new, new_eta = pdev_of(new_gamma)
            halvings = 0
            while new > old + 1e-12 * abs(old) and halvings < 30:
                new_gamma = 0.5 * (new_gamma + gamma)
                new, new_eta = pdev_of(new_gamma)
                halvings += 1
            delta = abs(new - old) / max(abs(new), 1e-12)
            gamma, eta, old = new_gamma, new_eta, new
            if delta < self.tol:
                converged = True
                break
        beta = gamma if tie is None else tie @ gamma
        return beta, it, float(old), converged


def _tie_matrix(p: int, blocks: Mapping[int, slice], active: Mapping[int, set]) -> np.ndarray | None:
    """0/1 matrix mapping reduced coefficients to full ones, tying active pairs exactly."""
    if not any(active.values()):
        return None
    group = np.arange(p)
    for b, pairs in active.items():
        start = blocks[b].start
        for j in sorted(pairs):
            group[start + j + 1] = group[start + j]
    _, cols = np.unique(group, return_inverse=True)
    tie = np.zeros((p, cols.max() + 1))
    tie[np.arange(p), cols] = 1.0
    return tie


def _violations(beta: np.ndarray, blocks: Mapping[int, slice], kinds: Mapping[int, str]) -> dict[int, set]:
    out: dict[int, set] = {}
    for b, sl in blocks.items():
        c = beta[sl]
        d = np.diff(c)
        eps = 1e-12 * (1.0 + float(np.max(np.abs(c))))
        bad = d < -eps if kinds[b] == "monotone_inc" else d > eps
        out[b] = set(int(j) for j in np.flatnonzero(bad))
    return out


def _monotone_penalty(p: int, blocks: Mapping[int, slice], active: Mapping[int, set]) -> np.ndarray:
    m = np.zeros((p, p))
    for b, pairs in active.items():
        start = blocks[b].start
        for j in pairs:
            i0, i1 = start + j, start + j + 1
            m[i0, i0] += MONOTONE_WEIGHT
            m[i1, i1] += MONOTONE_WEIGHT
            m[i0, i1] -= MONOTONE_WEIGHT
            m[i1, i0] -= MONOTONE_WEIGHT
    return m


def fit(
    family: str,
    specs: Sequence[SmoothSpec],
    data: Mapping[str, Any],
    response,
    tensors: Sequence[TensorSpec] = (),
    *,
    max_iter: int = 100,
    tol: float = 1e-8,
    allow_separation: bool = False,
    warm_start: FittedGAM | None = None,
) -> FittedGAM:
    """Fit a penalized additive model.

    Parameters
    ----------
    family : {"binomial_logit", "gaussian_log"}
    specs : smooth terms, one per feature
    data : mapping from feature name to values (a DataFrame works)
    response : 0/1 skip flags, or positive TRT in ms for ``gaussian_log``
    tensors : optional tensor-product interaction terms
    allow_separation : return a flagged model instead of raising when the
        binomial fit runs off to infinity

    Monotone constraints are imposed by refitting with a ``1e9`` quadratic
    penalty on every violated adjacent coefficient difference until no new
    violation appears; the active pairs are then tied exactly and the model
    refit, which makes the constraint hold to rounding error.
    """
    if family not in FAMILIES:
        raise ValidationError(f"unknown family {family!r}")
    specs = list(specs)
    tensors = list(tensors)
    feats = [s.feature for s in specs]
    if len(set(feats)) != len(feats):
        raise ValidationError("duplicate smooth features")
    _bump_fit_counter()

    y_raw = np.asarray(response, dtype=float).ravel()
    n = y_raw.size
    if family == "binomial_logit":
        if not np.isin(y_raw, (0.0, 1.0)).all():
            raise ValidationError("binomial response must be 0/1")
        y = y_raw
    else:
        if not np.all(y_raw > 0):
            raise ValidationError("gaussian_log response must be positive")
        y = np.log(y_raw)

    n_coef = 1 + sum(s.n_splines for s in specs)
    n_coef += sum((t.n_splines[0] - 1) * (t.n_splines[1] - 1) for t in tensors)
    if n < 10 * n_coef:
        raise ValidationError(f"{n} rows is too few for {n_coef} coefficients")

    blocks_x = [np.ones((n, 1))]
    pens = [np.zeros((1, 1))]
    knots_list, slices, kinds = [], {}, {}
    col = 1
    for i, s in enumerate(specs):
        x = _column(data, s.feature)
        if x.size != n:
            raise ValidationError(f"feature {s.feature!r} has {x.size} rows, response has {n}")
        knots = make_knots(x, s.n_splines, s.spline_degree)
        b = basis_eval(knots, s.spline_degree, x)
        pen = s.lam * penalty_matrix(s.n_splines, s.penalty_order)
        if s.penalty_order >= 1:
            # the data term is flat along "shift smooth, counter-shift intercept";
            # a rank-one penalty on the smooth's training mean pins it to zero
            c = b.mean(axis=0)
            pen = pen + float(n) * np.outer(c, c)
        blocks_x.append(b)
        pens.append(pen)
        knots_list.append(knots)
        slices[i] = slice(col, col + s.n_splines)
        if s.constraint != "none":
            kinds[i] = s.constraint
        col += s.n_splines
    tensor_parts = []
    for t in tensors:
        fa, fb = t.features
        xa, xb = _column(data, fa), _column(data, fb)
        ka = make_knots(xa, t.n_splines[0], t.spline_degree)
        kb = make_knots(xb, t.n_splines[1], t.spline_degree)
        ba = basis_eval(ka, t.spline_degree, xa)
        bb = basis_eval(kb, t.spline_degree, xb)
        za, zb = centering_basis(ba.mean(axis=0)), centering_basis(bb.mean(axis=0))
        ta = row_tensor(ba @ za, bb @ zb)
        pa = za.T @ penalty_matrix(t.n_splines[0], t.penalty_order) @ za
        pb = zb.T @ penalty_matrix(t.n_splines[1], t.penalty_order) @ zb
        pen = t.lam * (np.kron(pa, np.eye(pb.shape[0])) + np.kron(np.eye(pa.shape[0]), pb))
        blocks_x.append(ta)
        pens.append(pen)
        tensor_parts.append((ka, kb, za, zb, slice(col, col + ta.shape[1])))
        col += ta.shape[1]
    xmat = np.hstack(blocks_x)
    penalty = linalg.block_diag(*pens)
    p = xmat.shape[1]

    prob = _Problem(family, xmat, y, penalty, max_iter, tol)
    if warm_start is not None and warm_start.coefficients.size == p:
        beta = np.array(warm_start.coefficients)
    else:
        beta = np.zeros(p)
        if family == "binomial_logit":
            m = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
            beta[0] = np.log(m / (1 - m))
        else:
            beta[0] = float(y.mean())

    total_iter = 0
    active: dict[int, set] = {b: set() for b in kinds}
    beta, it, pdev, conv = prob.solve(penalty, None, beta)
    total_iter += it
    for _ in range(p):
        viol = _violations(beta, {b: slices[b] for b in kinds}, kinds)
        new = {b: viol[b] - active[b] for b in kinds}
        if not any(new.values()):
            break
        for b in kinds:
            active[b] |= new[b]
        pen_total = penalty + _monotone_penalty(p, slices, active)
        beta, it, pdev, conv = prob.solve(pen_total, None, beta)
        total_iter += it
    if any(active.values()):
        for _ in range(p):
            tie = _tie_matrix(p, slices, active)
            beta, it, pdev, conv = prob.solve(penalty, tie, beta)
            total_iter += it
            viol = _violations(beta, {b: slices[b] for b in kinds}, kinds)
            new = {b: viol[b] - active[b] for b in kinds}
            if not any(new.values()):
                break
            for b in kinds:
                active[b] |= new[b]

    eta = xmat @ beta
    separated = False
    if family == "binomial_logit":
        deviance = _binomial_deviance(y, eta)
        if float(np.max(np.abs(eta))) > SEPARATION_ETA or not np.all(np.isfinite(beta)):
            separated = True
            if not allow_separation:
                raise SeparationError(
                    "binomial fit diverges (linear predictor beyond "
                    f"+/-{SEPARATION_ETA:g}); the classes look separable, try a larger lambda"
                )
    else:
        resid = y - eta
        deviance = float(resid @ resid)
    if not conv:
        logger.warning("%s fit did not converge in %d iterations", family, max_iter)

    smooths = []
    for i, s in enumerate(specs):
        smooths.append(FittedSmooth(s, _frozen(knots_list[i]), _frozen(beta[slices[i]])))
    fitted_tensors = []
    for t, (ka, kb, za, zb, sl) in zip(tensors, tensor_parts):
        fitted_tensors.append(
            FittedTensor(t, (_frozen(ka), _frozen(kb)), (_frozen(za), _frozen(zb)), _frozen(beta[sl]))
        )
    info = FitInfo(
        iterations=total_iter,
        penalized_deviance=pdev,
        deviance=deviance,
        converged=bool(conv),
        n_obs=n,
        active_constraints={specs[b].feature: tuple(sorted(a)) for b, a in active.items()},
        separated=separated,
    )
    diagnostics: dict[str, float] = {}
    smear_n, smear_sum, smear = 0, 0.0, 1.0
    if family == "gaussian_log":
        resid = y - eta
        smear_n = n
        smear_sum = float(np.sum(np.exp(resid)))
        smear = smear_sum / smear_n
        diagnostics["r2_log"] = r_squared(y, eta)
        diagnostics["rmse_log"] = float(np.sqrt(np.mean(resid * resid)))
    elif 0 < y.sum() < n:
        diagnostics["auc"] = auc(y, eta)
    return FittedGAM(
        family=family,
        intercept=float(beta[0]),
        smooths=tuple(smooths),
        tensors=tuple(fitted_tensors),
        info=info,
        smearing_factor=smear,
        residual_n=smear_n,
        residual_exp_sum=smear_sum,
        diagnostics=diagnostics,
        config_hash=model_spec_hash(family, specs, tensors),
    )


# ---------------------------------------------------------------------------
# prediction


def predict_skip(model: FittedGAM, rows: Mapping[str, Any]) -> np.ndarray:
    if model.family != "binomial_logit":
        raise ValidationError(f"predict_skip needs a binomial_logit model, got {model.family}")
    return expit(linear_predictor(model, rows))


def predict_trt_ms(model: FittedGAM, rows: Mapping[str, Any]) -> np.ndarray:
    if model.family != "gaussian_log":
        raise ValidationError(f"predict_trt_ms needs a gaussian_log model, got {model.family}")
    return np.exp(linear_predictor(model, rows)) * model.smearing_factor


def predict_response(model: FittedGAM, rows: Mapping[str, Any]) -> np.ndarray:
    if model.family == "binomial_logit":
        return predict_skip(model, rows)
    return predict_trt_ms(model, rows)


def partial_effect(
    model: FittedGAM,
    feature: str,
    grid,
    means: Mapping[str, float],
) -> np.ndarray:
    """Response-scale predictions along ``grid`` for ``feature``, other features at ``means``.

    Returns an ``(n, 2)`` array of ``(x, y)`` pairs.
    """
    if feature not in model.features:
        raise ValidationError(f"model has no smooth for {feature!r}")
    grid = np.asarray(grid, dtype=float).ravel()
    rows = {f: np.full(grid.size, float(means[f])) for f in model.features if f != feature}
    for t in model.tensors:
        for f in t.spec.features:
            if f != feature and f not in rows:
                rows[f] = np.full(grid.size, float(means[f]))
    rows[feature] = grid
    return np.column_stack([grid, predict_response(model, rows)])
