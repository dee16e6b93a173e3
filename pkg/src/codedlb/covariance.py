"""Covariance operator of the limit diffusion and its PSD square root.

The arrival part of ``Phi`` is ``lam L! Zbar(i, j, r)`` where ``Zbar`` sums
``<e_i, D D^T e_j>`` over configurations ``D`` of sampled queue lengths.
Only a handful of aggregated counts decide the two coordinates of a jump:
how many sampled servers sit below ``i-1``, at ``i-1``, at ``i``, strictly
between ``i`` and ``j-1``, at ``j-1``, at ``j`` and above ``j``.  The closed
forms below sum over those counts (multinomial in the limit, binomial for
finite ``n``).
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np
from numba import njit

from .core import CountVector, CovMatrix, NumericalError, SystemParams, as_probs
from .rates import config_weights

PSD_TOL = 1e-10
JACOBI_TOL = 1e-13


def _routed(count: int, earlier: int, k: int) -> int:
    """Jobs received by ``count`` servers that have ``earlier`` shorter picks ahead of them."""
    return min(count, max(k - earlier, 0))


def _compositions(total: int, parts: int):
    for cut in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        out = []
        for c in cut:
            out.append(c - prev - 1)
            prev = c
        out.append(total + parts - 2 - prev)
        yield tuple(out)


def _coef_diag(g, k):
    b, at_prev, at_j, _ = g
    return (_routed(at_prev, b, k) - _routed(at_j, b + at_prev, k)) ** 2


def _coef_adjacent(g, k):
    b, at_prev, at_i, at_j, _ = g
    into_i = _routed(at_prev, b, k)
    into_j = _routed(at_i, b + at_prev, k)
    out_j = _routed(at_j, b + at_prev + at_i, k)
    return (into_i - into_j) * (into_j - out_j)


def _coef_far(g, k):
    b, at_ip, at_i, mid, at_jp, at_j, _ = g
    d_i = _routed(at_ip, b, k) - _routed(at_i, b + at_ip, k)
    below_jp = b + at_ip + at_i + mid
    d_j = _routed(at_jp, below_jp, k) - _routed(at_j, below_jp + at_jp, k)
    return d_i * d_j


_SHAPES = {"diag": (4, _coef_diag), "adjacent": (5, _coef_adjacent), "far": (7, _coef_far)}


@lru_cache(maxsize=64)
def _index_table(kind: str, L: int, k: int):
    """Nonzero terms of the index sum: ``(counts, coefficient, 1/prod counts!)``."""
    parts, coef_fn = _SHAPES[kind]
    rows, coefs = [], []
    for g in _compositions(L, parts):
        c = coef_fn(g, k)
        if c != 0:
            rows.append(g)
            coefs.append(c)
    if not rows:
        rows, coefs = [(0,) * (parts - 1) + (L,)], [0]
    g = np.array(rows, dtype=np.int64)
    coef = np.array(coefs, dtype=np.int64)
    inv = 1.0 / np.prod([[math.factorial(v) for v in row] for row in rows], axis=1)
    return g, coef, inv


def _group_masses(p: np.ndarray, tail: float, i: int, j: int):
    """Masses of the aggregated groups for the pair ``i <= j``."""
    K = p.size - 1

    def at(m):
        return p[m] if 0 <= m <= K else 0.0

    def span(a, b):  # sum of p[a..b]
        a = max(a, 0)
        b = min(b, K)
        return float(p[a : b + 1].sum()) if b >= a else 0.0

    above_j = span(j + 1, K) + tail
    if i == j:
        return [span(0, j - 2), at(j - 1), at(j), above_j], "diag"
    if j == i + 1:
        return [span(0, i - 2), at(i - 1), at(i), at(j), above_j], "adjacent"
    return [span(0, i - 2), at(i - 1), at(i), span(i + 1, j - 2), at(j - 1), at(j), above_j], "far"


def _zbar_from_masses(masses, kind, L, k) -> float:
    g, coef, inv = _index_table(kind, L, k)
    s = np.asarray(masses, dtype=float)
    return float(np.sum(coef * inv * np.prod(s[None, :] ** g, axis=1)))


def zbar_diag(j: int, r, L: int, k: int) -> float:
    """Limit second moment of coordinate ``j`` of an arrival jump (per ``L!``)."""
    if j < 0:
        return 0.0
    p, tail = as_probs(r)
    masses, kind = _group_masses(p, tail, j, j)
    return _zbar_from_masses(masses, kind, L, k)


def zbar_offdiag(i: int, j: int, r, L: int, k: int) -> float:
    """Limit cross moment of coordinates ``i`` and ``j`` of an arrival jump (per ``L!``)."""
    if i > j:
        i, j = j, i
    if i < 0:
        return 0.0
    if i == j:
        return zbar_diag(j, r, L, k)
    p, tail = as_probs(r)
    masses, kind = _group_masses(p, tail, i, j)
    return _zbar_from_masses(masses, kind, L, k)


def zbar_matrix(r, L: int, k: int, K: int | None = None) -> np.ndarray:
    """All ``Zbar(i, j)`` on ``0..K``, evaluated in one vectorized pass per pair type."""
    p, tail = as_probs(r, K)
    n = p.size
    below = np.concatenate(([0.0, 0.0], np.cumsum(p)))[:n]  # sum p[0..m-2] at index m
    prev = np.concatenate(([0.0], p[:-1]))
    above = np.concatenate((np.cumsum(p[::-1])[::-1][1:], [0.0])) + tail
    out = np.zeros((n, n))

    def accumulate(kind, masses, rows, cols):
        g, coef, inv = _index_table(kind, L, k)
        vals = np.prod(masses[:, None, :] ** g[None, :, :], axis=2) @ (coef * inv)
        out[rows, cols] = vals
        out[cols, rows] = vals

    idx = np.arange(n)
    accumulate("diag", np.stack([below, prev, p, above], axis=1), idx, idx)
    if n > 1:
        i = idx[:-1]
        accumulate("adjacent", np.stack([below[i], prev[i], p[i], p[i + 1], above[i + 1]], axis=1), i, i + 1)
    if n > 2:
        ii, jj = np.triu_indices(n, 2)
        csum = np.concatenate(([0.0], np.cumsum(p)))
        mid = csum[jj - 1] - csum[ii + 1]  # p[i+1 .. j-2]
        masses = np.stack([below[ii], prev[ii], p[ii], mid, prev[jj], p[jj], above[jj]], axis=1)
        accumulate("far", masses, ii, jj)
    return out


def service_cov(r, k: int, K: int | None = None) -> np.ndarray:
    """``k sum_{i>=1} (e_{i-1} - e_i)(e_{i-1} - e_i)^T r_i`` on ``0..K``."""
    p, _ = as_probs(r, K)
    n = p.size
    out = np.zeros((n, n))
    for i in range(1, n):
        w = k * p[i]
        out[i - 1, i - 1] += w
        out[i, i] += w
        out[i - 1, i] -= w
        out[i, i - 1] -= w
    return out


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return np.triu(a) + np.triu(a, 1).T


def phi_matrix(r, params: SystemParams, K: int | None = None) -> CovMatrix:
    """Instantaneous covariance of the limit diffusion at state ``r``."""
    zb = zbar_matrix(r, params.L, params.k, K)
    phi = params.lam * math.factorial(params.L) * zb + service_cov(r, params.k, K)
    return CovMatrix(_symmetrize(phi))


def phi_enumeration(r, params: SystemParams, K: int) -> np.ndarray:
    """Brute-force ``Phi``: weighted sum of ``D D^T`` over every configuration."""
    w, deltas = config_weights(r, params.L, params.k, K)
    d = deltas[:, : K + 1].astype(float)
    arr = params.lam * math.factorial(params.L) * (d.T * w) @ d
    return arr + service_cov(r, params.k, K)


def phi_powerd(r, d: int, lam: float, K: int | None = None) -> CovMatrix:
    """Supermarket covariance: shortest of ``d`` sampled queues gets the job."""
    p, tail = as_probs(r, K)
    n = p.size
    above = np.concatenate((np.cumsum(p[::-1])[::-1][1:], [0.0])) + tail
    shortest_at = sum(math.comb(d, i) * p**i * above ** (d - i) for i in range(1, d + 1))
    out = np.zeros((n, n))
    for j in range(n):
        w = lam * shortest_at[j]
        out[j, j] += w
        if j + 1 < n:
            out[j + 1, j + 1] += w
            out[j, j + 1] -= w
            out[j + 1, j] -= w
    out += service_cov(p, 1)
    return CovMatrix(_symmetrize(out))


@njit(cache=True)
def _jacobi_sweeps(A, V, target, max_sweeps):
    # rotates A toward diagonal in place, accumulating rotations in V; returns sweeps used or -1
    n = A.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n):
            for q in range(n):
                if p != q:
                    off += A[p, q] * A[p, q]
        if np.sqrt(off) <= target:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for m in range(n):
                    amp = A[m, p]
                    amq = A[m, q]
                    A[m, p] = c * amp - s * amq
                    A[m, q] = s * amp + c * amq
                for m in range(n):
                    apm = A[p, m]
                    aqm = A[q, m]
                    A[p, m] = c * apm - s * aqm
                    A[q, m] = s * apm + c * aqm
                A[p, q] = 0.0
                A[q, p] = 0.0
                for m in range(n):
                    vmp = V[m, p]
                    vmq = V[m, q]
                    V[m, p] = c * vmp - s * vmq
                    V[m, q] = s * vmp + c * vmq
    return -1


def jacobi_eigh(a, tol: float = JACOBI_TOL, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm drops below ``tol`` (or
    below round-off of the matrix norm, whichever is larger).  Returns
    ascending eigenvalues and the matching orthonormal eigenvectors as
    columns.
    """
    A = np.array(a, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    target = max(tol, 8 * np.finfo(float).eps * np.linalg.norm(A))
    if _jacobi_sweeps(A, V, target, max_sweeps) < 0:
        raise NumericalError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def sqrt_psd(phi, tol: float = PSD_TOL) -> CovMatrix:
    """Symmetric PSD square root; tiny negative eigenvalues are clamped to zero."""
    m = phi.entries if isinstance(phi, CovMatrix) else np.asarray(phi, dtype=float)
    if not np.allclose(m, m.T, rtol=0, atol=1e-14 * max(1.0, np.abs(m).max())):
        raise NumericalError("matrix is not symmetric")
    w, V = jacobi_eigh(m)
    top = max(abs(w).max(initial=0.0), np.finfo(float).tiny)
    if w[0] < -tol * top:
        raise NumericalError(f"matrix is not PSD: eigenvalue {w[0]:.3g} vs max {top:.3g}")
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return CovMatrix(_symmetrize(0.5 * (root + root.T)))


def z_prelimit(i: int, j: int, x, L: int, k: int) -> int:
    """Finite-n analogue of ``Zbar``: binomial counts of sampled server sets."""
    if i > j:
        i, j = j, i
    if i < 0:
        return 0
    counts = np.asarray(x.counts if isinstance(x, CountVector) else x, dtype=np.int64)
    K = max(counts.size - 1, j + 1)
    p = np.zeros(K + 1, dtype=np.int64)
    p[: counts.size] = counts
    masses, kind = _group_masses(p, 0, i, j)
    g, coef, _ = _index_table(kind, L, k)
    total = 0
    for row, c in zip(g.tolist(), coef.tolist()):
        term = c
        for m, cnt in zip(masses, row):
            term *= math.comb(int(m), cnt)
            if term == 0:
                break
        total += term
    return total


def z_prelimit_diag(j: int, x, L: int, k: int) -> int:
    return z_prelimit(j, j, x, L, k)


def trace_bound(params: SystemParams) -> float:
    """Explicit bound on ``trace(Phi(r))`` valid for every distribution ``r``."""
    L, k = params.L, params.k
    return params.lam * math.factorial(L) * (k * k * 4.0**L / math.factorial(L)) * 2 + 2 * k
