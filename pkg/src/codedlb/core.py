"""Domain types and small vector helpers shared across the package.

Every state vector is a dense numpy array indexed by queue length.  The
deterministic and diffusion models live on coordinates ``0..K``; the exact
n-server chain keeps unbounded integer counts.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MASS_TOL = 1e-12
ZERO_SUM_TOL = 1e-10


class ValidationError(ValueError):
    """Raised when a parameter or state violates its documented invariants."""


class NumericalError(RuntimeError):
    """Raised when a numerical routine cannot meet its accuracy contract."""


class TruncationLeakWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SystemParams:
    """Model constants.

    ``c`` (files per L-subset) never enters a rate; it is kept so that every
    report records the full parameter set.
    """

    n: int
    lam: float
    L: int
    k: int
    c: int = 1
    T: float = 10.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError("n must be a positive integer")
        if int(self.L) != self.L or self.L < 1:
            raise ValidationError("L must be a positive integer")
        if int(self.k) != self.k or self.k < 1:
            raise ValidationError("k must be a positive integer")
        if self.k > self.L:
            raise ValidationError("k must satisfy k <= L")
        if self.L > self.n:
            raise ValidationError("L must satisfy L <= n")
        if not self.lam >= 0:
            raise ValidationError("lambda must be nonnegative")
        if int(self.c) != self.c or self.c < 1:
            raise ValidationError("c must be a positive integer")
        if not self.T > 0:
            raise ValidationError("T must be positive")

    @classmethod
    def powerd(cls, d: int, lam: float, n: int = 10_000, T: float = 10.0):
        """Supermarket model: sample ``d`` queues, join the shortest."""
        return cls(n=n, lam=lam, L=d, k=1, T=T)

    def replace(self, **changes) -> "SystemParams":
        values = dict(n=self.n, lam=self.lam, L=self.L, k=self.k, c=self.c, T=self.T)
        values.update(changes)
        return SystemParams(**values)

    def as_dict(self) -> dict:
        return dict(n=self.n, lam=self.lam, L=self.L, k=self.k, c=self.c, T=self.T)


@dataclass(frozen=True)
class TruncationConfig:
    K: int = 20
    leak_tol: float = 1e-6

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ValidationError("K must be an integer >= 2")
        if self.leak_tol < 0:
            raise ValidationError("leak_tol must be nonnegative")

    @property
    def size(self) -> int:
        return self.K + 1

    def check_leak(self, leak: float, where: str = "") -> None:
        if leak > self.leak_tol:
            warnings.warn(
                f"mass beyond level K={self.K} is {leak:.3g} > leak_tol={self.leak_tol:g}"
                + (f" ({where})" if where else ""),
                TruncationLeakWarning,
                stacklevel=3,
            )


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QueuePMF:
    """Truncated queue-length distribution ``probs[0..K]`` plus mass beyond K."""

    probs: np.ndarray
    tail_mass: float = 0.0

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("probs must be a nonempty 1-d vector")
        if np.any(p < 0) or self.tail_mass < 0:
            raise ValidationError("probabilities must be nonnegative")
        total = p.sum() + self.tail_mass
        if abs(total - 1.0) > MASS_TOL * max(1, p.size):
            raise ValidationError(f"total mass {total!r} differs from 1")
        object.__setattr__(self, "probs", _readonly(p))
        object.__setattr__(self, "tail_mass", float(self.tail_mass))

    @property
    def K(self) -> int:
        return self.probs.size - 1

    @classmethod
    def point(cls, j: int, K: int) -> "QueuePMF":
        """All servers at queue length ``j``."""
        p = np.zeros(K + 1)
        if j <= K:
            p[j] = 1.0
            return cls(p)
        return cls(p, tail_mass=1.0)

    @classmethod
    def from_array(cls, v, K: int | None = None) -> "QueuePMF":
        """Wrap a vector that already sums to (about) one, cutting it at ``K``."""
        v = np.asarray(v, dtype=float)
        if K is None:
            K = v.size - 1
        p = np.zeros(K + 1)
        m = min(K + 1, v.size)
        p[:m] = v[:m]
        tail = float(v[m:].sum()) if v.size > m else max(0.0, 1.0 - p.sum())
        if tail < MASS_TOL:
            tail = 0.0
        return cls(p, tail)

    def resized(self, K: int) -> "QueuePMF":
        """Same distribution on ``0..K``; mass cut off moves into ``tail_mass``."""
        if K >= self.K:
            p = np.zeros(K + 1)
            p[: self.K + 1] = self.probs
            return QueuePMF(p, self.tail_mass)
        return QueuePMF(self.probs[: K + 1].copy(), self.tail_mass + float(self.probs[K + 1 :].sum()))


@dataclass
class CountVector:
    """Occupancy counts of the exact chain; grows with the longest queue."""

    counts: np.ndarray
    n: int = field(default=0)

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.ndim != 1:
            raise ValidationError("counts must be a 1-d vector")
        if np.any(c < 0):
            raise ValidationError("counts must be nonnegative")
        total = int(c.sum())
        if self.n == 0:
            self.n = total
        if total != self.n:
            raise ValidationError(f"counts sum to {total}, expected n={self.n}")
        if self.n < 1:
            raise ValidationError("n must be positive")
        self.counts = c

    @classmethod
    def empty(cls, n: int, capacity: int = 8) -> "CountVector":
        c = np.zeros(max(capacity, 2), dtype=np.int64)
        c[0] = n
        return cls(c, n)

    @classmethod
    def from_pmf(cls, pmf, n: int) -> "CountVector":
        """Largest-remainder rounding of ``n * pmf`` to integer counts summing to n."""
        p = np.asarray(pmf.probs if isinstance(pmf, QueuePMF) else pmf, dtype=float)
        raw = n * p / p.sum()
        base = np.floor(raw).astype(np.int64)
        short = n - int(base.sum())
        if short > 0:
            order = np.argsort(-(raw - base), kind="stable")
            base[order[:short]] += 1
        return cls(base, n)

    @property
    def max_level(self) -> int:
        nz = np.flatnonzero(self.counts)
        return int(nz[-1]) if nz.size else 0

    @property
    def jobs_total(self) -> int:
        return int(np.dot(np.arange(self.counts.size), self.counts))

    def copy(self) -> "CountVector":
        return CountVector(self.counts.copy(), self.n)


@dataclass(frozen=True)
class FluctuationVector:
    """Element of the zero-sum subspace, truncated to coordinates ``0..K``."""

    coords: np.ndarray

    def __post_init__(self):
        x = np.array(self.coords, dtype=float)
        scale = max(1.0, float(np.abs(x).sum()))
        if abs(x.sum()) > ZERO_SUM_TOL * scale:
            raise ValidationError(f"fluctuation coordinates sum to {x.sum():.3g}, not 0")
        object.__setattr__(self, "coords", _readonly(x))

    @classmethod
    def zeros(cls, K: int) -> "FluctuationVector":
        return cls(np.zeros(K + 1))

    @classmethod
    def project(cls, v) -> "FluctuationVector":
        v = np.asarray(v, dtype=float)
        return cls(v - v.mean())


@dataclass(frozen=True)
class CovMatrix:
    """Symmetric positive semidefinite matrix on coordinates ``0..K``."""

    entries: np.ndarray
    psd_tol: float = 1e-10

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError("covariance must be a square matrix")
        if not np.array_equal(a, a.T):
            raise ValidationError("covariance must be exactly symmetric")
        object.__setattr__(self, "entries", _readonly(a))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def min_relative_eigenvalue(self) -> float:
        w = np.linalg.eigvalsh(self.entries)
        top = max(abs(w[-1]), np.finfo(float).tiny)
        return float(w[0] / top)


def normalize(v) -> QueuePMF:
    """Scale a nonnegative vector to a probability vector."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError("expected a nonempty 1-d vector")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValidationError("entries must be finite and nonnegative")
    s = v.sum()
    if s <= 0:
        raise ValidationError("vector has zero total mass")
    return QueuePMF(v / s, 0.0)


def pmf_from_counts(c: CountVector, trunc: TruncationConfig | int) -> QueuePMF:
    K = trunc.K if isinstance(trunc, TruncationConfig) else int(trunc)
    counts = c.counts
    probs = np.zeros(K + 1)
    m = min(K + 1, counts.size)
    probs[:m] = counts[:m] / c.n
    tail = float(counts[m:].sum()) / c.n
    return QueuePMF(probs, tail)


def as_probs(r, K: int | None = None) -> tuple[np.ndarray, float]:
    """Return ``(probs, tail)`` from a QueuePMF or a raw vector.

    For a raw vector the tail is whatever mass is missing from one, so
    perturbed states ``r + u x`` with zero-sum ``x`` keep the same tail.
    """
    if isinstance(r, QueuePMF):
        p, tail = r.probs, r.tail_mass
    else:
        p = np.asarray(r, dtype=float)
        tail = max(0.0, 1.0 - float(p.sum()))
    if K is not None and p.size != K + 1:
        q = np.zeros(K + 1)
        m = min(K + 1, p.size)
        q[:m] = p[:m]
        tail += float(p[m:].sum())
        p = q
    return p, tail


def d0_distance(mu, nu) -> float:
    """Weighted metric ``sum_j |mu_j - nu_j| / 2**j`` on distributions over N0."""
    a = np.asarray(mu, dtype=float)
    b = np.asarray(nu, dtype=float)
    m = max(a.size, b.size)
    a = np.pad(a, (0, m - a.size))
    b = np.pad(b, (0, m - b.size))
    return float(np.sum(np.abs(a - b) / 2.0 ** np.arange(m)))


def spawn_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one replicate.

    The stream is ``SeedSequence(master_seed, spawn_key=key)``, so a
    replicate's draws depend only on the master seed and its own key, never
    on which worker runs it or in what order.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(v) for v in key))
    return np.random.default_rng(ss)
