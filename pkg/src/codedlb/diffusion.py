"""Euler-Maruyama simulation of the Gaussian fluctuation SDE.

``dX = G(X, pi(t)) dt + a(t) dW`` on coordinates ``0..K``, with ``a(t)`` the
PSD square root of ``Phi(pi(t))``.  ``G`` is linear in ``X``, so the drift
is a matrix ``J(t)`` and both ``J`` and ``a`` are computed once per grid time
and shared by every replicate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import FluctuationVector, NumericalError, QueuePMF, SystemParams, TruncationConfig, spawn_rng
from .covariance import phi_matrix, sqrt_psd
from .drift import drift_G_matrix
from .fluid import FluidTrajectory

log = logging.getLogger(__name__)

PROJECTION_FLAG = 1e-6


@dataclass
class SdeCoefficients:
    times: np.ndarray
    pi: np.ndarray  # (steps + 1, K + 1)
    drift: np.ndarray  # J(t_m), (steps + 1, K + 1, K + 1)
    noise: np.ndarray  # a(t_m)
    _maps: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.pi.shape[1]

    @property
    def steps(self) -> int:
        return self.times.size - 1

    def step_maps(self, h: float) -> np.ndarray:
        """``I + h J(t_m)^T`` so that one Euler drift step is ``X @ map``."""
        key = float(h)
        cached = self._maps.get(key)
        if cached is None:
            cached = np.eye(self.dim)[None] + h * self.drift.transpose(0, 2, 1)
            self._maps[key] = cached
        return cached


def _euler_times(T: float, dt: float) -> np.ndarray:
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} must divide T={T}")
    return np.round(np.arange(steps + 1) * dt, 12)


def sde_coefficients(pi_traj: FluidTrajectory, params: SystemParams, dt: float = 0.1) -> SdeCoefficients:
    """Drift matrix and noise root at every Euler time, read off the fluid path."""
    times = _euler_times(float(pi_traj.times[-1]), dt)
    K = pi_traj.K
    d = K + 1
    pis = np.empty((times.size, d))
    J = np.empty((times.size, d, d))
    A = np.empty((times.size, d, d))
    for m, t in enumerate(times):
        try:
            idx = pi_traj.index(t)
        except KeyError:
            raise ValueError(f"fluid trajectory has no state at t={t:g}; its grid must contain every Euler time") from None
        pmf = pi_traj.pmf(idx)
        pis[m] = pmf.probs
        J[m] = drift_G_matrix(pmf, params, K)
        A[m] = sqrt_psd(phi_matrix(pmf, params, K)).entries
    return SdeCoefficients(times, pis, J, A)


@dataclass
class SdeTrajectory:
    times: np.ndarray
    paths: np.ndarray  # (reps, steps + 1, K + 1) or (reps, 1, K + 1) if only the end is kept
    projection: np.ndarray  # largest zero-sum correction per step
    coeffs: SdeCoefficients
    flagged: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[:, -1, :]

    def state(self, rep: int, i: int = -1) -> FluctuationVector:
        return FluctuationVector.project(self.paths[rep, i])

    def to_csv(self, path, rep: int = 0) -> None:
        d = self.paths.shape[2]
        times = self.times if self.paths.shape[1] == self.times.size else self.times[-1:]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"x_{j}" for j in range(d)])
            for t, row in zip(times, self.paths[rep]):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


@njit(cache=True)
def _euler_kernel(X, step_maps, kicks, paths, keep_path, proj):
    # X <- X @ step_maps[m] + kicks[m], then re-centre each row; proj[m] is the largest shift
    reps, d = X.shape
    row = np.empty(d)
    for m in range(kicks.shape[0]):
        M = step_maps[m]
        worst = 0.0
        for r in range(reps):
            for j in range(d):
                row[j] = kicks[m, r, j]
            for i in range(d):
                xi = X[r, i]
                if xi != 0.0:
                    for j in range(d):
                        row[j] += xi * M[i, j]
            shift = row.sum() / d
            for j in range(d):
                X[r, j] = row[j] - shift
            if abs(shift) > worst:
                worst = abs(shift)
        proj[m] = worst
        if keep_path:
            paths[:, m + 1] = X


def replicate_noise(seed: int, rep: int, steps: int, dim: int, stream: int = 0) -> np.ndarray:
    """Standard normal increments of one replicate; depends only on (seed, stream, rep)."""
    return spawn_rng(seed, stream, rep).standard_normal((steps, dim))


def simulate_sde(
    x0,
    pi_traj: FluidTrajectory | None,
    params: SystemParams,
    trunc: TruncationConfig | None = None,
    dt: float = 0.1,
    seed: int = 0,
    reps: int = 1,
    first_rep: int = 0,
    keep_path: bool = True,
    coeffs: SdeCoefficients | None = None,
    stream: int = 0,
) -> SdeTrajectory:
    """Euler-Maruyama paths of the fluctuation process.

    Replicate ``r`` uses the noise stream keyed by ``(seed, stream, first_rep + r)``,
    so a batch and the same replicates run one at a time agree exactly.
    After each step the state is projected back onto the zero-sum
    hyperplane; corrections above ``1e-6`` flag a truncation-dominated run.
    """
    if coeffs is None:
        if pi_traj is None:
            raise ValueError("need a fluid trajectory or precomputed coefficients")
        coeffs = sde_coefficients(pi_traj, params, dt)
    if trunc is not None and trunc.size != coeffs.dim:
        raise ValueError("truncation level does not match the fluid trajectory")
    d = coeffs.dim
    steps = coeffs.steps
    h = float(coeffs.times[1] - coeffs.times[0]) if steps else dt
    x0 = np.asarray(getattr(x0, "coords", x0), dtype=float)
    if x0.size != d:
        raise ValueError(f"x0 has {x0.size} coordinates, expected {d}")
    FluctuationVector(x0)  # zero-sum check

    # per-step transition I + h J^T and scaled noise, one batched product each
    step_maps = coeffs.step_maps(h)
    noise = np.stack([replicate_noise(seed, first_rep + r, steps, d, stream) for r in range(reps)], axis=1)
    kicks = np.sqrt(h) * np.matmul(noise, coeffs.noise[:steps].transpose(0, 2, 1))
    X = np.tile(x0, (reps, 1))
    paths = np.empty((reps, steps + 1 if keep_path else 1, d))
    if keep_path:
        paths[:, 0] = X
    proj = np.zeros(steps)
    _euler_kernel(X, step_maps, np.ascontiguousarray(kicks), paths, keep_path, proj)
    proj *= np.sqrt(d)
    if not np.all(np.isfinite(X)):
        raise NumericalError("SDE state became non-finite")
    if not keep_path:
        paths[:, 0] = X
    flagged = bool(proj.max(initial=0.0) > PROJECTION_FLAG)
    if flagged:
        log.warning("zero-sum projection reached %.3g; truncation dominates this run", proj.max())
    return SdeTrajectory(coeffs.times, paths, proj, coeffs, flagged)


def reconstruct(pi, x, n: int) -> np.ndarray:
    """Approximate finite-n occupancy ``pi + x / sqrt(n)`` (may dip below 0)."""
    p = np.asarray(pi.probs if isinstance(pi, QueuePMF) else pi, dtype=float)
    xv = np.asarray(getattr(x, "coords", x), dtype=float)
    if p.shape[-1] != xv.shape[-1]:
        raise ValueError("pi and x must have the same length")
    return p + xv / np.sqrt(n)
