"""Limit drift of the empirical measure and its combinatorial kernels.

An arriving request samples ``L`` servers and sends one job to each of the
``k`` shortest.  Summing over the sorted queue-length configurations of the
sampled servers gives the arrival kernel ``zeta_bar``; the drift adds the
service flow, with no departures out of empty queues.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize

from .core import CountVector, QueuePMF, SystemParams, as_probs


@dataclass(frozen=True)
class Configuration:
    """Sorted queue lengths of the ``L`` sampled servers."""

    levels: tuple

    def __post_init__(self):
        lv = tuple(int(v) for v in self.levels)
        if any(a > b for a, b in zip(lv, lv[1:])):
            raise ValueError("levels must be nondecreasing")
        if lv and lv[0] < 0:
            raise ValueError("levels must be nonnegative")
        object.__setattr__(self, "levels", lv)

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def rho(self) -> dict:
        out: dict = {}
        for v in self.levels:
            out[v] = out.get(v, 0) + 1
        return out


def jump_vector(cfg: Configuration, k: int, K: int) -> np.ndarray:
    """Change in level counts when the ``k`` shortest of ``cfg`` each get a job."""
    delta = np.zeros(K + 2, dtype=np.int64)
    for lv in cfg.levels[:k]:
        delta[lv] -= 1
        delta[lv + 1] += 1
    return delta


def enumerate_configs(K: int, L: int):
    """Yield every nondecreasing ``L``-tuple over ``0..K`` once."""
    for lv in itertools.combinations_with_replacement(range(K + 1), L):
        yield Configuration(lv)


def _zeta_coefficients(L: int, k: int):
    # (i1, i2, weight) with weight = [i2 ^ (k - i1)] / (i1! i2! (L-i1-i2)!)
    out = []
    for i1 in range(k):
        for i2 in range(1, L - i1 + 1):
            w = min(i2, k - i1) / (
                math.factorial(i1) * math.factorial(i2) * math.factorial(L - i1 - i2)
            )
            out.append((i1, i2, w))
    return out


def _below_above(p: np.ndarray, tail: float):
    below = np.concatenate(([0.0], np.cumsum(p)[:-1]))
    above = np.concatenate((np.cumsum(p[::-1])[::-1][1:], [0.0])) + tail
    return below, above


def zeta_bar_vector(r, L: int, k: int, K: int | None = None) -> np.ndarray:
    """``zeta_bar(j, r)`` for every ``j = 0..K`` at once."""
    p, tail = as_probs(r, K)
    below, above = _below_above(p, tail)
    out = np.zeros_like(p)
    for i1, i2, w in _zeta_coefficients(L, k):
        out += w * below**i1 * p**i2 * above ** (L - i1 - i2)
    return out


def zeta_bar(j: int, r, L: int, k: int) -> float:
    """Arrival kernel: per-``L!`` rate of jobs landing on queues of length ``j``.

    ``j = -1`` returns 0 (there are no queues of negative length).
    """
    if j < 0:
        return 0.0
    zb = zeta_bar_vector(r, L, k)
    return float(zb[j]) if j < zb.size else 0.0


def arrival_drift(r, params: SystemParams, K: int | None = None) -> np.ndarray:
    """Arrival part ``lam L! [zeta_bar(j-1) - zeta_bar(j)]`` on ``0..K``."""
    zb = zeta_bar_vector(r, params.L, params.k, K)
    shifted = np.concatenate(([0.0], zb[:-1]))
    return params.lam * math.factorial(params.L) * (shifted - zb)


def service_drift(r, k: int, K: int | None = None) -> np.ndarray:
    """``k (r_{j+1} - r_j 1{j >= 1})`` with ``r_{K+1} := 0``."""
    p, _ = as_probs(r, K)
    up = np.concatenate((p[1:], [0.0]))
    own = p.copy()
    own[0] = 0.0
    return k * (up - own)


def drift_F(r, params: SystemParams, K: int | None = None) -> np.ndarray:
    """Mean-field drift on coordinates ``0..K``.

    Mass leaves the truncated system only through arrivals at level ``K``,
    at rate ``arrival_leak(r, params)``.
    """
    return arrival_drift(r, params, K) + service_drift(r, params.k, K)


def arrival_leak(r, params: SystemParams, K: int | None = None) -> float:
    zb = zeta_bar_vector(r, params.L, params.k, K)
    return params.lam * math.factorial(params.L) * float(zb[-1])


def drift_F_powerd(r, d: int, lam: float, K: int | None = None) -> np.ndarray:
    """Supermarket drift: each arrival joins the shortest of ``d`` sampled queues."""
    if d < 1:
        raise ValueError("d must be >= 1")
    p, tail = as_probs(r, K)
    _, above = _below_above(p, tail)
    at_least = p + above  # sum_{m >= j}
    prev = np.concatenate(([0.0], p[:-1]))
    into = np.zeros_like(p)
    out = np.zeros_like(p)
    for i in range(1, d + 1):
        c = math.comb(d, i)
        into += c * prev**i * at_least ** (d - i)
        out += c * p**i * above ** (d - i)
    return lam * (into - out) + service_drift(p, 1)


def zeta_exact(j: int, x, L: int, k: int) -> int:
    """Prelimit arrival kernel with binomial weights on integer counts."""
    if j < 0:
        return 0
    counts = np.asarray(x.counts if isinstance(x, CountVector) else x, dtype=np.int64)
    if j >= counts.size:
        return 0
    below = int(counts[:j].sum())
    at = int(counts[j])
    above = int(counts[j + 1 :].sum())
    total = 0
    for i1 in range(k):
        b1 = math.comb(below, i1)
        if b1 == 0:
            continue
        for i2 in range(1, L - i1 + 1):
            total += (
                b1 * min(i2, k - i1) * math.comb(at, i2) * math.comb(above, L - i1 - i2)
            )
    return total


@lru_cache(maxsize=32)
def _config_table(K: int, L: int, k: int):
    """Dense tables over all configurations with levels ``<= K``.

    Returns ``(rho, deltas, inv_fact)``: level multiplicities, jump vectors
    of length ``K + 2`` and ``1 / prod rho_i!`` per configuration.
    """
    cfgs = list(itertools.combinations_with_replacement(range(K + 1), L))
    m = len(cfgs)
    rho = np.zeros((m, K + 1), dtype=np.int64)
    deltas = np.zeros((m, K + 2), dtype=np.int64)
    for row, lv in enumerate(cfgs):
        for v in lv:
            rho[row, v] += 1
        for v in lv[:k]:
            deltas[row, v] -= 1
            deltas[row, v + 1] += 1
    fact = np.array([math.factorial(i) for i in range(L + 1)], dtype=float)
    inv_fact = 1.0 / np.prod(fact[rho], axis=1)
    for a in (rho, deltas, inv_fact):
        a.setflags(write=False)
    return rho, deltas, inv_fact


def config_weights(r, L: int, k: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """``(prod_i r_i^rho_i / rho_i!, jump vectors)`` over the truncated configuration set."""
    p, _ = as_probs(r, K)
    rho, deltas, inv_fact = _config_table(K, L, k)
    w = np.prod(np.power(p[None, :], rho), axis=1) * inv_fact
    return w, deltas


def arrival_oracle_vector(r, params: SystemParams, K: int) -> np.ndarray:
    """Brute-force arrival drift by summing over every configuration."""
    w, deltas = config_weights(r, params.L, params.k, K)
    full = params.lam * math.factorial(params.L) * (w @ deltas)
    return full[: K + 1]


def arrival_component_oracle(j: int, r, params: SystemParams, K: int) -> float:
    if j < 0 or j > K + 1:
        return 0.0
    w, deltas = config_weights(r, params.L, params.k, K)
    return float(params.lam * math.factorial(params.L) * (w @ deltas[:, j]))


def powerd_tail_guess(d: int, lam: float, K: int) -> np.ndarray:
    """Classical supermarket fixed point ``v_m = lam^((d^m - 1)/(d - 1))`` as a pmf."""
    m = np.arange(K + 2)
    if d == 1:
        expo = m.astype(float)
    else:
        expo = (float(d) ** m - 1.0) / (d - 1.0)
    v = lam**expo
    return v[:-1] - v[1:]


def fixed_point_powerd(d: int, lam: float, K: int = 20, tol: float = 1e-13) -> QueuePMF:
    """Root of the truncated supermarket drift, found from the closed-form guess."""
    guess = powerd_tail_guess(d, lam, K)

    def residual(p):
        f = drift_F_powerd(np.abs(p), d, lam, K)
        f[-1] = p.sum() - 1.0  # drift coordinates sum to -leak; replace one by normalization
        return f

    sol = optimize.root(residual, guess, method="hybr", tol=tol)
    p = np.clip(sol.x, 0.0, None)
    p /= p.sum()
    return QueuePMF(p, 0.0)


def tail_sums(probs, tail: float = 0.0) -> np.ndarray:
    """``v_m = sum_{j >= m} probs_j`` (plus mass beyond the last coordinate)."""
    p = np.asarray(probs, dtype=float)
    return np.cumsum(p[::-1])[::-1] + tail


def zeta_bound_constant(L: int, k: int) -> float:
    """Constant ``c`` with ``zeta_bar(j, r) <= c * r_j`` for every distribution."""
    return k * 3.0**L / math.factorial(L)
