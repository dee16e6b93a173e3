"""Linearized drift ``G(x, r) = d/du F(r + u x)`` of the fluctuation process.

``G`` splits into three directional pieces of the arrival kernel (the
below-``j`` mass, the level-``j`` mass and the above-``j`` mass move with
``x``) plus the service difference.  Mass above ``j`` is moved by
``-sum_{m<=j} x_m``, which equals ``sum_{m>j} x_m`` on the zero-sum space
and needs no truncation tail.
"""

from __future__ import annotations

import math

import numpy as np

from .core import SystemParams, as_probs
from .rates import _below_above, _zeta_coefficients


def _directions(x: np.ndarray):
    cx = np.cumsum(x)
    below_x = np.concatenate(([0.0], cx[:-1]))
    above_x = -cx
    return below_x, above_x


def _pow(base: np.ndarray, e: int) -> np.ndarray:
    # exponent -1 only appears with a zero coefficient
    return base ** max(e, 0)


def xi_vectors(x, r, L: int, k: int, K: int | None = None):
    """The four pieces of ``G`` for every coordinate: ``(xi1, xi2, xi3, xi4)``."""
    p, tail = as_probs(r, K)
    x = np.asarray(getattr(x, "coords", x), dtype=float)
    if x.size != p.size:
        raise ValueError("x and r must have the same length")
    below, above = _below_above(p, tail)
    below_x, above_x = _directions(x)
    xi1 = np.zeros_like(p)
    xi2 = np.zeros_like(p)
    xi3 = np.zeros_like(p)
    for i1, i2, w in _zeta_coefficients(L, k):
        i3 = L - i1 - i2
        if i1:
            xi1 += w * i1 * _pow(below, i1 - 1) * p**i2 * above**i3
        xi2 += w * i2 * below**i1 * _pow(p, i2 - 1) * above**i3
        if i3:
            xi3 += w * i3 * below**i1 * p**i2 * _pow(above, i3 - 1)
    xi1 *= below_x
    xi2 *= x
    xi3 *= above_x
    xi4 = np.concatenate((x[1:], [0.0])) - x
    return xi1, xi2, xi3, xi4


def xi_components(x, r, L: int, k: int, which: int, j: int) -> float:
    """Single entry ``xi^which_j``; indices outside ``0..K`` give 0."""
    if which not in (1, 2, 3, 4):
        raise ValueError("which must be 1, 2, 3 or 4")
    parts = xi_vectors(x, r, L, k)
    v = parts[which - 1]
    return float(v[j]) if 0 <= j < v.size else 0.0


def drift_G(x, r, params: SystemParams, K: int | None = None) -> np.ndarray:
    """Directional derivative of ``drift_F`` at ``r`` along ``x``."""
    xi1, xi2, xi3, xi4 = xi_vectors(x, r, params.L, params.k, K)
    arr = xi1 + xi2 + xi3
    arr_prev = np.concatenate(([0.0], arr[:-1]))
    serve = xi4.copy()
    serve[0] += np.asarray(getattr(x, "coords", x), dtype=float)[0]  # no departures from level 0
    return params.lam * math.factorial(params.L) * (arr_prev - arr) + params.k * serve


def drift_G_matrix(r, params: SystemParams, K: int | None = None) -> np.ndarray:
    """Matrix ``J`` with ``G(x, r) = J @ x`` (``G`` is linear in ``x``)."""
    p, _ = as_probs(r, K)
    n = p.size
    eye = np.eye(n)
    return np.stack([drift_G(eye[m], r, params, K) for m in range(n)], axis=1)


def drift_G_powerd(x, r, d: int, lam: float, K: int | None = None) -> np.ndarray:
    """Closed-form directional derivative of the supermarket drift."""
    p, tail = as_probs(r, K)
    x = np.asarray(getattr(x, "coords", x), dtype=float)
    _, above = _below_above(p, tail)
    at_least = p + above
    _, above_x = _directions(x)
    at_least_x = x + above_x
    prev = np.concatenate(([0.0], p[:-1]))
    prev_x = np.concatenate(([0.0], x[:-1]))
    into = np.zeros_like(p)
    out = np.zeros_like(p)
    for i in range(1, d + 1):
        c = math.comb(d, i)
        into += c * (
            i * _pow(prev, i - 1) * prev_x * at_least ** (d - i)
            + (d - i) * prev**i * _pow(at_least, d - i - 1) * at_least_x
        )
        out += c * (
            i * _pow(p, i - 1) * x * above ** (d - i)
            + (d - i) * p**i * _pow(above, d - i - 1) * above_x
        )
    serve = np.concatenate((x[1:], [0.0])) - x
    serve[0] += x[0]
    return lam * (into - out) + serve


def drift_G_supermarket2(x, r, lam: float, K: int | None = None) -> np.ndarray:
    """Expanded ``d = 2`` form.

    ``2 lam [x_{i-1} v_i + r_{i-1} X_i + r_{i-1} x_{i-1}
    - x_i v_{i+1} - r_i X_{i+1} - r_i x_i] + (x_{i+1} - x_i 1{i>=1})``
    with ``v_i = sum_{m>=i} r_m`` and ``X_i = sum_{m>=i} x_m``.
    """
    p, tail = as_probs(r, K)
    x = np.asarray(getattr(x, "coords", x), dtype=float)
    _, above = _below_above(p, tail)
    v = p + above
    v_next = above
    _, above_x = _directions(x)
    X = x + above_x
    X_next = above_x
    prev = np.concatenate(([0.0], p[:-1]))
    prev_x = np.concatenate(([0.0], x[:-1]))
    arr = 2 * lam * (
        prev_x * v + prev * X + prev * prev_x - x * v_next - p * X_next - p * x
    )
    serve = np.concatenate((x[1:], [0.0])) - x
    serve[0] += x[0]
    return arr + serve
