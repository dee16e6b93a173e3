"""Fixed-step RK4 integration of the mean-field ODE ``d pi/dt = F(pi)``."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import NumericalError, QueuePMF, SystemParams, TruncationConfig, as_probs
from .rates import service_drift, zeta_bar_vector

log = logging.getLogger(__name__)

STEP_DOUBLING_TOL = 1e-6
MASS_DRIFT_TOL = 1e-9


@dataclass
class FluidTrajectory:
    times: np.ndarray
    probs: np.ndarray  # (len(times), K + 1), clamped at output
    leak: np.ndarray
    params: SystemParams
    trunc: TruncationConfig
    h: float
    clamped: float = 0.0  # largest negative magnitude removed at output
    doubling_error: float = float("nan")
    mass_drift: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.times.size

    @property
    def K(self) -> int:
        return self.probs.shape[1] - 1

    def index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} is not on the trajectory grid")
        return i

    def pmf(self, i: int) -> QueuePMF:
        p = self.probs[i]
        leak = max(float(self.leak[i]), 0.0)
        s = p.sum() + leak
        return QueuePMF(p / s, leak / s)

    def at(self, t: float) -> QueuePMF:
        return self.pmf(self.index(t))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"pi_{j}" for j in range(self.K + 1)] + ["leak"])
            for t, row, lk in zip(self.times, self.probs, self.leak):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [repr(float(lk))])


def _rhs(y: np.ndarray, params: SystemParams, K: int) -> np.ndarray:
    # y = (pi_0..pi_K, leak); the tail seen by the kernel is the leaked mass
    p = y[:-1]
    zb = zeta_bar_vector(p, params.L, params.k, K)
    scale = params.lam * math.factorial(params.L)
    out = np.empty_like(y)
    out[:-1] = scale * (np.concatenate(([0.0], zb[:-1])) - zb) + service_drift(p, params.k, K)
    out[-1] = scale * zb[-1]
    return out


def _integrate(y0, params, K, h, grid):
    y = y0.copy()
    t = 0.0
    out = np.empty((grid.size, y0.size))
    for gi, tg in enumerate(grid):
        span = tg - t
        if span < -1e-12:
            raise ValueError("grid must be nondecreasing and start at or after 0")
        nsteps = int(np.ceil(span / h - 1e-9)) if span > 0 else 0
        if nsteps:
            dt = span / nsteps
            for _ in range(nsteps):
                k1 = _rhs(y, params, K)
                k2 = _rhs(y + 0.5 * dt * k1, params, K)
                k3 = _rhs(y + 0.5 * dt * k2, params, K)
                k4 = _rhs(y + dt * k3, params, K)
                y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = tg
        out[gi] = y
    return out


def solve_ode(
    pi0,
    params: SystemParams,
    trunc: TruncationConfig | None = None,
    h: float = 0.01,
    grid=None,
    check_doubling: bool = True,
) -> FluidTrajectory:
    """Integrate the mean-field ODE from ``pi0`` and sample it on ``grid``.

    A second pass at step ``h/2`` bounds the integration error; an
    ``l1`` disagreement above ``1e-6`` at any grid time raises
    :class:`NumericalError` naming that time.
    """
    trunc = trunc or TruncationConfig()
    K = trunc.K
    if grid is None:
        grid = np.linspace(0.0, params.T, int(round(params.T / 0.1)) + 1)
    grid = np.asarray(grid, dtype=float)
    if grid.size > 1 and h > np.min(np.diff(grid)) + 1e-12:
        raise ValueError("step h must not exceed the grid spacing")
    p0, tail0 = as_probs(pi0, K)
    y0 = np.concatenate((p0, [tail0]))

    coarse = _integrate(y0, params, K, h, grid)
    err = float("nan")
    if check_doubling:
        fine = _integrate(y0, params, K, h / 2, grid)
        diffs = np.abs(coarse[:, :-1] - fine[:, :-1]).sum(axis=1)
        err = float(diffs.max(initial=0.0))
        bad = np.flatnonzero(diffs > STEP_DOUBLING_TOL)
        if bad.size:
            t_bad = grid[bad[0]]
            raise NumericalError(
                f"step-doubling error {diffs[bad[0]]:.3g} exceeds {STEP_DOUBLING_TOL:g} at t={t_bad:g}"
            )

    probs = coarse[:, :-1]
    leak = coarse[:, -1]
    mass_drift = float(np.abs(probs.sum(axis=1) + leak - 1.0).max(initial=0.0))
    horizon = max(float(grid[-1]), 1.0) if grid.size else 1.0
    if mass_drift > MASS_DRIFT_TOL * horizon:
        log.warning("ODE mass drift %.3g exceeds %.1g per unit time", mass_drift, MASS_DRIFT_TOL)
    neg = probs.min(initial=0.0)
    clamped = float(-neg) if neg < 0 else 0.0
    if clamped > 1e-12:
        log.warning("clamped negative ODE coordinate of magnitude %.3g", clamped)
    probs = np.clip(probs, 0.0, None)
    if leak.size:
        trunc.check_leak(float(leak[-1]), where="fluid solve")
    return FluidTrajectory(
        times=grid,
        probs=probs,
        leak=leak,
        params=params,
        trunc=trunc,
        h=h,
        clamped=clamped,
        doubling_error=err,
        mass_drift=mass_drift,
    )
