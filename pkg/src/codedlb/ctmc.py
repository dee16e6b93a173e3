"""Exact event-driven simulation of the n-server chain on level counts.

The state is the occupancy vector ``counts[j] = #servers with queue length j``.
Events happen at total rate ``n lam + k * #busy``.  An arrival samples ``L``
distinct servers uniformly (an urn draw over the counts) and adds one job to
each of the ``k`` shortest; a departure picks a busy server uniformly.

Two engines consume the random stream in the same order: a numba kernel
for throughput and a pure Python ``step`` that also records events.  Given
the same generator they produce identical trajectories.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import CountVector, QueuePMF, SystemParams, ValidationError, pmf_from_counts
from .rates import Configuration, zeta_exact

LARGE_LEVEL = 6  # queues with at least this many jobs count as "large"


@dataclass
class CtmcState:
    t: float
    counts: CountVector
    jobs_total: int
    rng: np.random.Generator

    @classmethod
    def start(cls, init: CountVector, rng: np.random.Generator, t: float = 0.0) -> "CtmcState":
        c = init.copy()
        if c.counts.size < c.max_level + 3:
            grown = np.zeros(c.max_level + 8, dtype=np.int64)
            grown[: c.counts.size] = c.counts
            c = CountVector(grown, c.n)
        return cls(t, c, c.jobs_total, rng)


@dataclass(frozen=True)
class EventRecord:
    kind: str  # "arrival" or "departure"
    t: float
    config: Configuration | None  # sampled queue lengths for an arrival
    level: int  # departure: queue length before the departure
    jobs_total: int


def sample_configuration(counts, L: int, rng: np.random.Generator) -> Configuration:
    """Queue lengths of ``L`` distinct servers drawn uniformly, sorted."""
    counts = np.asarray(getattr(counts, "counts", counts), dtype=np.int64)
    n = int(counts.sum())
    if L > n:
        raise ValidationError("cannot sample more servers than exist")
    taken: dict = {}
    levels = []
    for s in range(L):
        v = int(rng.random() * (n - s))
        j = 0
        while True:
            avail = int(counts[j]) - taken.get(j, 0)
            if v < avail:
                break
            v -= avail
            j += 1
        taken[j] = taken.get(j, 0) + 1
        levels.append(j)
    return Configuration(tuple(sorted(levels)))


def _ensure_capacity(state: CtmcState) -> None:
    c = state.counts.counts
    top = int(np.flatnonzero(c)[-1]) if c.any() else 0
    if top + 2 >= c.size:
        grown = np.zeros(2 * c.size, dtype=np.int64)
        grown[: c.size] = c
        state.counts.counts = grown


def step(state: CtmcState, params: SystemParams, horizon: float = np.inf) -> EventRecord | None:
    """Advance by one event in place.

    Returns None if no event can occur, or if the next event falls after
    ``horizon``; in that case the clock moves but the counts do not.
    """
    _ensure_capacity(state)
    c = state.counts.counts
    n = state.counts.n
    busy = n - int(c[0])
    arr_rate = n * params.lam
    total = arr_rate + params.k * busy
    if total <= 0:
        return None
    state.t += state.rng.standard_exponential() / total
    if state.t > horizon:
        return None
    u = state.rng.random()
    if u * total < arr_rate:
        cfg = sample_configuration(c, params.L, state.rng)
        for lv in cfg.levels[: params.k]:
            c[lv] -= 1
            c[lv + 1] += 1
        state.jobs_total += params.k
        return EventRecord("arrival", state.t, cfg, -1, state.jobs_total)
    v = int(state.rng.random() * busy)
    j = 1
    while v >= c[j]:
        v -= int(c[j])
        j += 1
    c[j] -= 1
    c[j - 1] += 1
    state.jobs_total -= 1
    return EventRecord("departure", state.t, None, j, state.jobs_total)


@njit(cache=True)
def _run_kernel(counts, t, horizon, n, lam, L, k, rng, sample_times, sample_idx, snaps, max_events):
    # returns (t, sample_idx, events, status); status 0 = done, 1 = needs a wider counts array
    size = counts.size
    top = 0
    for j in range(size):
        if counts[j] > 0:
            top = j
    taken = np.zeros(size, dtype=np.int64)
    sel = np.zeros(L, dtype=np.int64)
    ns = sample_times.size
    events = 0
    arr_rate = n * lam
    while True:
        if top + 2 >= size:
            return t, sample_idx, events, 1
        if max_events >= 0 and events >= max_events:
            return t, sample_idx, events, 0
        busy = n - counts[0]
        total = arr_rate + k * busy
        if total <= 0.0:
            while sample_idx < ns:
                snaps[sample_idx, :] = counts
                sample_idx += 1
            return np.inf, sample_idx, events, 0
        t_new = t + rng.standard_exponential() / total
        while sample_idx < ns and sample_times[sample_idx] < t_new:
            snaps[sample_idx, :] = counts
            sample_idx += 1
        if t_new > horizon:
            return t_new, sample_idx, events, 0
        u = rng.random()
        if u * total < arr_rate:
            for s in range(L):
                v = int(rng.random() * (n - s))
                j = 0
                while True:
                    avail = counts[j] - taken[j]
                    if v < avail:
                        break
                    v -= avail
                    j += 1
                taken[j] += 1
                sel[s] = j
            for s in range(L):
                taken[sel[s]] = 0
            # insertion sort; L is small
            for a in range(1, L):
                x = sel[a]
                b = a - 1
                while b >= 0 and sel[b] > x:
                    sel[b + 1] = sel[b]
                    b -= 1
                sel[b + 1] = x
            for s in range(k):
                counts[sel[s]] -= 1
                counts[sel[s] + 1] += 1
                if sel[s] + 1 > top:
                    top = sel[s] + 1
        else:
            v = int(rng.random() * busy)
            j = 1
            while v >= counts[j]:
                v -= counts[j]
                j += 1
            counts[j] -= 1
            counts[j - 1] += 1
            while top > 0 and counts[top] == 0:
                top -= 1
        t = t_new
        events += 1


@dataclass
class CtmcTrajectory:
    times: np.ndarray
    snapshots: np.ndarray  # (len(times), width) integer counts
    n: int
    params: SystemParams
    events: int
    final: CtmcState
    log: list = field(default_factory=list)

    def counts(self, i: int) -> CountVector:
        return CountVector(self.snapshots[i].copy(), self.n)

    def pmf(self, i: int, K: int) -> QueuePMF:
        return pmf_from_counts(self.counts(i), K)

    def metrics(self):
        """Per-sample ``(empty, large, mean_len)`` from exact counts."""
        s = self.snapshots
        levels = np.arange(s.shape[1])
        empty = s[:, 0].astype(float)
        large = s[:, LARGE_LEVEL:].sum(axis=1).astype(float)
        mean_len = (s @ levels) / self.n
        return empty, large, mean_len

    def to_csv(self, path, K: int | None = None) -> None:
        width = self.snapshots.shape[1]
        top = int(np.flatnonzero(self.snapshots.any(axis=0))[-1]) if self.snapshots.any() else 0
        kmax = top if K is None else K
        empty, large, mean_len = self.metrics()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"level_{j}" for j in range(kmax + 1)] + ["empty_count", "large_count", "mean_len"])
            for i, t in enumerate(self.times):
                row = self.snapshots[i]
                lv = [int(row[j]) if j < width else 0 for j in range(kmax + 1)]
                if kmax + 1 < width:
                    lv[-1] += int(row[kmax + 1 :].sum())
                w.writerow([repr(float(t))] + lv + [int(empty[i]), int(large[i]), repr(float(mean_len[i]))])


def simulate(
    params: SystemParams,
    init: CountVector | None = None,
    sample_times=None,
    rng: np.random.Generator | int | None = None,
    engine: str = "jit",
    max_events: int = -1,
    record_events: bool = False,
) -> CtmcTrajectory:
    """Simulate up to ``params.T`` and record the counts at ``sample_times``.

    The snapshot at time ``s`` is the state after every event at time ``<= s``.
    ``engine="python"`` runs :func:`step` and can keep the full event log;
    both engines give the same path for the same generator state.
    """
    if init is None:
        init = CountVector.empty(params.n)
    if init.n != params.n:
        raise ValidationError(f"initial state has {init.n} servers, params say n={params.n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if sample_times is None:
        sample_times = np.linspace(0.0, params.T, int(round(params.T / 0.1)) + 1)
    sample_times = np.asarray(sample_times, dtype=float)
    if sample_times.size and (np.any(np.diff(sample_times) < 0) or sample_times[0] < 0 or sample_times[-1] > params.T):
        raise ValidationError("sample_times must be sorted within [0, T]")
    if record_events and engine != "python":
        raise ValidationError("event logs are only kept by the python engine")

    state = CtmcState.start(init, rng)
    if engine == "jit":
        return _simulate_jit(params, state, sample_times, max_events)
    if engine == "python":
        return _simulate_python(params, state, sample_times, max_events, record_events)
    raise ValidationError(f"unknown engine {engine!r}")


def _simulate_jit(params, state, sample_times, max_events):
    counts = state.counts.counts
    snaps = np.zeros((sample_times.size, counts.size), dtype=np.int64)
    idx = 0
    total_events = 0
    t = state.t
    while True:
        budget = -1 if max_events < 0 else max_events - total_events
        t_out, idx, ev, status = _run_kernel(
            counts, t, float(params.T), params.n, float(params.lam), params.L, params.k,
            state.rng, sample_times, idx, snaps, budget,
        )
        total_events += ev
        if status == 0:
            t = t_out
            break
        t = t_out
        grown = np.zeros(2 * counts.size, dtype=np.int64)
        grown[: counts.size] = counts
        counts = grown
        wider = np.zeros((sample_times.size, counts.size), dtype=np.int64)
        wider[:, : snaps.shape[1]] = snaps
        snaps = wider
    if max_events >= 0 and idx < sample_times.size:
        snaps[idx:] = counts  # stopped early: later samples repeat the last state
    state.counts = CountVector(counts, params.n)
    state.t = t
    state.jobs_total = state.counts.jobs_total
    return CtmcTrajectory(sample_times, snaps, params.n, params, total_events, state)


def _simulate_python(params, state, sample_times, max_events, record_events):
    rows = []
    idx = 0
    events = 0
    log = []
    while True:
        if max_events >= 0 and events >= max_events:
            break
        prev = state.counts.counts.copy()
        rec = step(state, params, horizon=params.T)
        if rec is None:
            if state.t <= params.T:
                state.t = np.inf  # absorbed: nothing can happen
            break
        while idx < sample_times.size and sample_times[idx] < state.t:
            rows.append(prev)
            idx += 1
        events += 1
        if record_events:
            log.append(rec)
    while idx < sample_times.size:
        rows.append(state.counts.counts.copy())
        idx += 1
    width = max((r.size for r in rows), default=state.counts.counts.size)
    snaps = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        snaps[i, : r.size] = r
    return CtmcTrajectory(sample_times, snaps, params.n, params, events, state, log)


def transition_rates(counts, params: SystemParams) -> dict:
    """Generator row at ``counts``: target count vector (as tuple) -> rate.

    Built from the prelimit kernel ``zeta_exact``: arrivals to the ``k``
    shortest of a uniformly chosen ``L``-subset, one departure per busy
    server at rate ``k``.
    """
    c = np.asarray(getattr(counts, "counts", counts), dtype=np.int64)
    n = int(c.sum())
    top = int(np.flatnonzero(c)[-1]) if c.any() else 0
    width = max(c.size, top + 2 + params.k)
    base = np.zeros(width, dtype=np.int64)
    base[: c.size] = c
    out: dict = {}
    subsets = math.comb(n, params.L)
    # enumerate sampled configurations with multiplicities prod C(c_i, rho_i)
    for lv in itertools.combinations_with_replacement(range(top + 1), params.L):
        cfg = Configuration(lv)
        mult = 1
        for level, m in cfg.rho.items():
            mult *= math.comb(int(base[level]), m)
        if not mult:
            continue
        nxt = base.copy()
        for level in lv[: params.k]:
            nxt[level] -= 1
            nxt[level + 1] += 1
        key = tuple(int(v) for v in np.trim_zeros(nxt, "b"))
        out[key] = out.get(key, 0.0) + n * params.lam * mult / subsets
    for j in range(1, top + 1):
        if base[j]:
            nxt = base.copy()
            nxt[j] -= 1
            nxt[j - 1] += 1
            key = tuple(int(v) for v in np.trim_zeros(nxt, "b"))
            out[key] = out.get(key, 0.0) + params.k * int(base[j])
    return out


def level_arrival_rate(counts, params: SystemParams, j: int) -> float:
    """Rate at which jobs land on queues of length ``j`` (prelimit kernel)."""
    c = np.asarray(getattr(counts, "counts", counts), dtype=np.int64)
    n = int(c.sum())
    return n * params.lam * zeta_exact(j, c, params.L, params.k) / math.comb(n, params.L)
