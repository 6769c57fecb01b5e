"""B-spline bases and difference penalties."""

from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline

from ..errors import ValidationError


def make_knots(x: np.ndarray, n_splines: int, degree: int = 3) -> np.ndarray:
    """Clamped knot vector with interior knots at equally spaced quantiles of ``x``.

    When ties make the quantile knots non-increasing (integer-valued
    features such as word length), interior knots fall back to equal
    spacing over the observed range.
    """
    if n_splines <= degree:
        raise ValidationError(f"n_splines={n_splines} must exceed degree={degree}")
    x = np.asarray(x, dtype=float)
    lo, hi = float(np.min(x)), float(np.max(x))
    if not hi > lo:
        raise ValidationError("cannot place knots on a constant feature")
    n_inner = n_splines - degree - 1
    probs = np.linspace(0.0, 1.0, n_inner + 2)[1:-1]
    inner = np.quantile(x, probs, method="linear") if n_inner else np.empty(0)
    grid = np.concatenate([[lo], inner, [hi]])
    if np.any(np.diff(grid) <= 0):
        inner = np.linspace(lo, hi, n_inner + 2)[1:-1]
    return np.concatenate([np.full(degree + 1, lo), inner, np.full(degree + 1, hi)])


def basis_eval(knots: np.ndarray, degree: int, x: np.ndarray) -> np.ndarray:
    """Dense B-spline design matrix; inputs outside the knot range are clamped."""
    t = np.asarray(knots, dtype=float)
    n = t.size - degree - 1
    if n < 1 or np.any(np.diff(t) < 0) or not t[degree] < t[n]:
        raise ValidationError("degenerate knot vector")
    x = np.clip(np.asarray(x, dtype=float), t[degree], t[n])
    return BSpline.design_matrix(x, t, degree, extrapolate=False).toarray()


def difference_matrix(n_coefs: int, order: int = 2) -> np.ndarray:
    if n_coefs <= order:
        raise ValidationError(f"n_coefs={n_coefs} must exceed penalty order {order}")
    return np.diff(np.eye(n_coefs), n=order, axis=0)


def penalty_matrix(n_coefs: int, order: int = 2) -> np.ndarray:
    """``D.T @ D`` for the ``order``-th difference operator (order 0 gives the identity)."""
    d = difference_matrix(n_coefs, order)
    return d.T @ d


def centering_basis(column_means: np.ndarray) -> np.ndarray:
    """Columns spanning ``{b : column_means @ b = 0}`` (sum-to-zero reparameterization)."""
    c = np.asarray(column_means, dtype=float).reshape(-1, 1)
    q, _ = np.linalg.qr(c, mode="complete")
    return q[:, 1:]


def row_tensor(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product of two design matrices."""
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)
