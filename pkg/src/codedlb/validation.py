"""Statistical checks tying the exact chain to its fluid and Gaussian limits.

``lln_convergence_study`` measures how fast CTMC paths approach the ODE as
``n`` grows.  ``covariation_check`` compares the covariance of short-window
CTMC increments with ``Phi * window``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import CountVector, QueuePMF, SystemParams, TruncationConfig, as_probs, d0_distance, pmf_from_counts, spawn_rng
from .covariance import phi_matrix
from .ctmc import simulate
from .fluid import solve_ode
from .rates import config_weights, drift_F


@dataclass
class Verdict:
    test: str
    statistic: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"test": self.test, "statistic": self.statistic, "tolerance": self.tolerance, "pass": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


@dataclass
class LlnTable:
    ns: list
    mean_error: list
    se: list
    slope: float
    decreasing: bool
    verdict: Verdict


def _loglog_slope(ns, errs) -> float:
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(errs, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def lln_convergence_study(
    ns=(100, 1000, 10000),
    params: SystemParams | None = None,
    reps: int = 20,
    seed: int = 0,
    K: int = 20,
    grid_dt: float = 0.1,
    slope_range=(-0.65, -0.35),
    pi0=None,
) -> LlnTable:
    """Mean over ``reps`` of ``sup_t d0(pi^n(t), pi(t))`` for each ``n``.

    Every system starts from the rounding of ``n * pi0`` (empty queues by
    default) and the ODE from ``pi0`` itself.  Passes when the means fall strictly with ``n`` and the log-log slope
    lies in ``slope_range``.
    """
    params = params or SystemParams(n=max(ns), lam=0.9, L=2, k=1)
    ns = [int(n) for n in ns]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n values must increase")
    steps = int(round(params.T / grid_dt))
    grid = np.round(np.arange(steps + 1) * grid_dt, 12)
    trunc = TruncationConfig(K)
    start = QueuePMF.point(0, K) if pi0 is None else QueuePMF(*as_probs(pi0, K))
    if start.tail_mass > 0:
        raise ValueError("pi0 must be supported on 0..K")
    ode = solve_ode(start, params, trunc, grid=grid)
    means, ses = [], []
    for n in ns:
        p = params.replace(n=n)
        init = CountVector.from_pmf(start.probs, n)
        errs = np.empty(reps)
        for r in range(reps):
            tr = simulate(p, init, grid, spawn_rng(seed, n, r))
            frac = tr.snapshots / n
            errs[r] = max(d0_distance(frac[i], ode.probs[i]) for i in range(grid.size))
        means.append(float(errs.mean()))
        ses.append(float(errs.std(ddof=1) / np.sqrt(reps)) if reps > 1 else float("nan"))
    slope = _loglog_slope(ns, means)
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    ok = decreasing and slope_range[0] <= slope <= slope_range[1]
    verdict = Verdict(
        "lln_convergence", slope, max(abs(slope_range[0] + 0.5), abs(slope_range[1] + 0.5)), ok,
        {"ns": ns, "mean_error": means, "decreasing": decreasing, "slope_range": list(slope_range)},
    )
    return LlnTable(ns, means, ses, slope, decreasing, verdict)


def fourth_moment_matrix(r, params: SystemParams, K: int) -> np.ndarray:
    """``Psi_ij``: jump-rate-weighted ``sum D_i^2 D_j^2`` per server.

    It sets the Poisson part of the variance of a sample covariance of
    short increments.
    """
    w, deltas = config_weights(r, params.L, params.k, K)
    D2 = (deltas[:, : K + 1].astype(float)) ** 2
    arr = params.lam * math.factorial(params.L) * (D2.T * w) @ D2
    p = np.asarray(r.probs if isinstance(r, QueuePMF) else r, dtype=float)
    serve = np.zeros((K + 1, K + 1))
    for m in range(1, K + 1):
        serve[m - 1, m - 1] += p[m]
        serve[m, m] += p[m]
        serve[m - 1, m] += p[m]
        serve[m, m - 1] += p[m]
    return arr + params.k * serve


@dataclass
class CovariationTable:
    estimate: np.ndarray
    target: np.ndarray
    sigma: np.ndarray
    z: np.ndarray
    verdict: Verdict
    start: QueuePMF


def covariation_check(
    params: SystemParams,
    window: float = 0.0025,
    reps: int = 5000,
    seed: int = 0,
    t0: float = 5.0,
    coords: int = 7,
    K: int = 20,
    nsigma: float = 5.0,
) -> CovariationTable:
    """Covariance of ``sqrt(n) (pi^n(t0+w) - pi^n(t0) - F w)`` against ``Phi w``.

    All windows start from the same count vector, the rounding of
    ``n * pi(t0)`` from the ODE, so ``Phi`` is evaluated at that exact
    state.  The standard error of each entry combines the Gaussian part
    ``w^2 (Phi_ii Phi_jj + Phi_ij^2)`` and the jump part ``w Psi_ij / n``.
    """
    n = params.n
    trunc = TruncationConfig(K)
    if t0 > 0:
        steps = max(1, int(round(t0 / 0.1)))
        ode = solve_ode(QueuePMF.point(0, K), params.replace(T=t0), trunc, grid=np.linspace(0, t0, steps + 1))
        start = CountVector.from_pmf(ode.pmf(len(ode) - 1).probs, n)
    else:
        start = CountVector.empty(n)
    r0 = pmf_from_counts(start, trunc)
    p = params.replace(T=window)
    base = r0.probs + drift_F(r0, params, K) * window
    inc = np.empty((reps, coords))
    for i in range(reps):
        tr = simulate(p, start, [window], spawn_rng(seed, i))
        snap = tr.snapshots[0]
        frac = np.zeros(K + 1)
        m = min(K + 1, snap.size)
        frac[:m] = snap[:m] / n
        inc[i] = np.sqrt(n) * (frac - base)[:coords]
    est = np.cov(inc, rowvar=False, ddof=1)
    phi = phi_matrix(r0, params, K).entries[:coords, :coords]
    psi = fourth_moment_matrix(r0, params, K)[:coords, :coords]
    target = phi * window
    dg = np.diag(phi)
    var = (window**2 * (np.outer(dg, dg) + phi**2) + window * psi / n) / reps
    sigma = np.sqrt(var)
    diff = est - target
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, np.abs(diff) / np.where(sigma > 0, sigma, 1.0), np.where(np.abs(diff) <= 1e-12, 0.0, np.inf))
    stat = float(z.max())
    verdict = Verdict(
        "covariation", stat, nsigma, bool(stat <= nsigma),
        {"window": window, "reps": reps, "n": n, "t0": t0, "coords": coords},
    )
    return CovariationTable(est, target, sigma, z, verdict, r0)
