"""Terminal metrics, confidence intervals, coverage experiments and timing.

A coverage cell builds a 95% interval for each metric from diffusion
replicates, then counts how many independent CTMC replicates land inside.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .core import CountVector, QueuePMF, SystemParams, TruncationConfig, ValidationError, spawn_rng
from .ctmc import LARGE_LEVEL, simulate
from .diffusion import SdeCoefficients, reconstruct, sde_coefficients, simulate_sde
from .fluid import solve_ode

log = logging.getLogger(__name__)

METRICS = ("empty_count", "large_count", "mean_len")
DIFFUSION_STREAM = 0
CTMC_STREAM = 1


@dataclass(frozen=True)
class MetricSample:
    empty_count: float
    large_count: float
    mean_len: float

    def as_tuple(self):
        return (self.empty_count, self.large_count, self.mean_len)


def metrics(pihat, n: int) -> MetricSample:
    """Empty servers, servers with at least 6 jobs, and jobs per server."""
    v = np.asarray(pihat.probs if isinstance(pihat, QueuePMF) else pihat, dtype=float)
    if v.ndim != 1 or v.size <= LARGE_LEVEL:
        raise ValidationError(f"need at least {LARGE_LEVEL + 1} levels")
    return MetricSample(
        float(n * v[0]),
        float(n * v[LARGE_LEVEL:].sum()),
        float(np.dot(np.arange(v.size), v)),
    )


def metrics_array(pihat: np.ndarray, n: int) -> np.ndarray:
    """Row-wise :func:`metrics` for a (reps, K+1) array; returns (reps, 3)."""
    v = np.atleast_2d(np.asarray(pihat, dtype=float))
    if v.shape[1] <= LARGE_LEVEL:
        raise ValidationError(f"need at least {LARGE_LEVEL + 1} levels")
    return np.column_stack((n * v[:, 0], n * v[:, LARGE_LEVEL:].sum(axis=1), v @ np.arange(v.shape[1])))


def confidence_interval(samples, level: float = 0.95, method: str = "percentile") -> tuple[float, float]:
    x = np.sort(np.asarray(samples, dtype=float))
    if x.size < 2:
        raise ValidationError("need at least two samples")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    alpha = 1.0 - level
    if method == "percentile":
        lo, hi = np.quantile(x, [alpha / 2, 1 - alpha / 2])
    elif method == "normal":
        z = norm.ppf(1 - alpha / 2)
        m, s = x.mean(), x.std(ddof=1)
        lo, hi = m - z * s, m + z * s
    else:
        raise ValidationError(f"unknown CI method {method!r}")
    return float(lo), float(hi)


def build_id() -> str:
    """``git describe`` of the source tree, or ``unknown`` outside a checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def provenance(params: SystemParams | None = None, trunc: TruncationConfig | None = None, **extra) -> dict:
    out = {"build": build_id()}
    if params is not None:
        out["params"] = params.as_dict()
    if trunc is not None:
        out["truncation"] = {"K": trunc.K, "leak_tol": trunc.leak_tol}
    out.update(extra)
    return out


@dataclass
class CoverageCell:
    L: int
    k: int
    ci: dict  # metric -> (low, high)
    coverage: dict  # metric -> fraction of CTMC samples inside
    hits: dict
    reps_diff: int
    reps_ctmc: int
    degenerate: list = field(default_factory=list)
    diffusion_samples: np.ndarray | None = None
    ctmc_samples: np.ndarray | None = None
    negativity: float = 0.0  # most negative reconstructed coordinate
    projection: float = 0.0

    def coverage_se(self, metric: str) -> float:
        p = self.coverage[metric]
        return float(np.sqrt(p * (1 - p) / self.reps_ctmc))


@dataclass
class CoverageReport:
    cells: list
    params: SystemParams
    trunc: TruncationConfig
    master_seed: int
    ci_method: str
    dt: float
    source: str = "ctmc"
    config: dict = field(default_factory=dict)

    def cell(self, L: int, k: int) -> CoverageCell:
        for c in self.cells:
            if (c.L, c.k) == (L, k):
                return c
        raise KeyError((L, k))

    def rows(self):
        for c in self.cells:
            for m in METRICS:
                lo, hi = c.ci[m]
                yield {
                    "L": c.L, "k": c.k, "metric": m,
                    "ci_low": lo, "ci_high": hi,
                    "coverage": c.coverage[m], "coverage_se": c.coverage_se(m),
                    "hits": c.hits[m], "reps_diff": c.reps_diff, "reps_ctmc": c.reps_ctmc,
                }

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["L", "k", "metric", "ci_low", "ci_high", "coverage", "coverage_se", "hits", "reps_diff", "reps_ctmc"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "provenance": provenance(
                self.params, self.trunc,
                master_seed=self.master_seed, ci_method=self.ci_method, dt=self.dt,
                source=self.source, config=self.config,
                seeding=(
                    "cell_seed = first 63-bit draw of SeedSequence(master_seed, spawn_key=(L, k)); "
                    "replicate r uses SeedSequence(cell_seed, spawn_key=(stream, r)); stream 0 diffusion, 1 ctmc"
                ),
            ),
            "cells": [
                {
                    "L": c.L, "k": c.k, "reps_diff": c.reps_diff, "reps_ctmc": c.reps_ctmc,
                    "metrics": {
                        m: {
                            "ci_low": c.ci[m][0], "ci_high": c.ci[m][1],
                            "coverage": c.coverage[m], "coverage_se": c.coverage_se(m), "hits": c.hits[m],
                        }
                        for m in METRICS
                    },
                    "degenerate_ci": c.degenerate,
                    "min_reconstructed_coordinate": c.negativity,
                    "max_projection": c.projection,
                }
                for c in self.cells
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def raw_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["L", "k", "source", "replicate", *METRICS])
        for c in self.cells:
            for name, arr in (("diffusion", c.diffusion_samples), (self.source, c.ctmc_samples)):
                if arr is None:
                    continue
                for i, row in enumerate(arr):
                    w.writerow([c.L, c.k, name, i] + [repr(float(v)) for v in row])
        return buf.getvalue()


def _ctmc_terminal(args):
    params, master_seed, reps = args
    out = np.empty((len(reps), 3))
    for i, r in enumerate(reps):
        rng = spawn_rng(_cell_seed(master_seed, params), CTMC_STREAM, r)
        tr = simulate(params, CountVector.empty(params.n), [params.T], rng)
        empty, large, mean_len = tr.metrics()
        out[i] = (empty[-1], large[-1], mean_len[-1])
    return out


def ctmc_terminal_metrics(params: SystemParams, reps: int, master_seed: int, jobs: int = 1) -> np.ndarray:
    """Terminal metrics of ``reps`` independent CTMC runs from the empty state."""
    idx = list(range(reps))
    if jobs <= 1 or reps < 2 * jobs:
        return _ctmc_terminal((params, master_seed, idx))
    chunks = [idx[i::jobs] for i in range(jobs)]
    out = np.empty((reps, 3))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for chunk, res in zip(chunks, pool.map(_ctmc_terminal, [(params, master_seed, c) for c in chunks])):
            out[chunk] = res
    return out


def diffusion_terminal_metrics(
    params: SystemParams, coeffs: SdeCoefficients, pi_T: np.ndarray, reps: int, master_seed: int,
    stream: int = DIFFUSION_STREAM,
):
    """Terminal metrics of reconstructed diffusion states ``pi(T) + X(T)/sqrt(n)``."""
    seed_key = _cell_seed(master_seed, params)
    sde = simulate_sde(
        np.zeros(coeffs.dim), None, params, dt=float(coeffs.times[1] - coeffs.times[0]),
        seed=seed_key, reps=reps, keep_path=False, coeffs=coeffs, stream=stream,
    )
    pihat = reconstruct(pi_T, sde.terminal, params.n)
    return metrics_array(pihat, params.n), float(pihat.min(initial=0.0)), float(sde.projection.max(initial=0.0))


def _cell_seed(master_seed: int, params: SystemParams) -> int:
    # a per-cell integer seed; replicate streams hang off it via spawn keys
    return int(spawn_rng(master_seed, params.L, params.k).integers(2**63))


def fluid_for(params: SystemParams, trunc: TruncationConfig, dt: float, h: float = 0.01):
    steps = int(round(params.T / dt))
    grid = np.round(np.arange(steps + 1) * dt, 12)
    return solve_ode(QueuePMF.point(0, trunc.K), params, trunc, h=min(h, dt), grid=grid)


def run_coverage(
    params: SystemParams,
    trunc: TruncationConfig | None = None,
    reps_diff: int = 200,
    reps_ctmc: int = 200,
    master_seed: int = 0,
    ci_method: str = "percentile",
    grid=((2, 1), (3, 2), (5, 4)),
    dt: float = 0.1,
    h: float = 0.01,
    jobs: int = 1,
    source: str = "ctmc",
    keep_samples: bool = True,
) -> CoverageReport:
    """Coverage of diffusion-based 95% intervals by CTMC terminal metrics, per (L, k).

    ``source="diffusion"`` replaces the CTMC by a fresh, independent set of
    diffusion replicates (a calibration null test).
    """
    trunc = trunc or TruncationConfig()
    if reps_diff < 2 or reps_ctmc < 2:
        raise ValidationError("need at least two replicates of each kind")
    cells = []
    for L, k in grid:
        cp = params.replace(L=L, k=k)
        traj = fluid_for(cp, trunc, dt, h)
        coeffs = sde_coefficients(traj, cp, dt)
        pi_T = traj.pmf(len(traj) - 1).probs
        diff, neg, proj = diffusion_terminal_metrics(cp, coeffs, pi_T, reps_diff, master_seed)
        if source == "ctmc":
            other = ctmc_terminal_metrics(cp, reps_ctmc, master_seed, jobs)
        elif source == "diffusion":
            other, _, _ = diffusion_terminal_metrics(cp, coeffs, pi_T, reps_ctmc, master_seed, stream=CTMC_STREAM)
        else:
            raise ValidationError(f"unknown source {source!r}")
        ci, cov, hits, degenerate = {}, {}, {}, []
        for m_i, m in enumerate(METRICS):
            lo, hi = confidence_interval(diff[:, m_i], 0.95, ci_method)
            if lo == hi:
                degenerate.append(m)
                log.warning("degenerate %s interval at L=%d k=%d", m, L, k)
            inside = int(np.count_nonzero((other[:, m_i] >= lo) & (other[:, m_i] <= hi)))
            ci[m] = (lo, hi)
            hits[m] = inside
            cov[m] = inside / reps_ctmc
        if neg < 0:
            log.info("reconstructed states dip to %.3g at L=%d k=%d", neg, L, k)
        cells.append(
            CoverageCell(
                L, k, ci, cov, hits, reps_diff, reps_ctmc, degenerate,
                diff if keep_samples else None, other if keep_samples else None, neg, proj,
            )
        )
    return CoverageReport(cells, params, trunc, master_seed, ci_method, dt, source)


@dataclass
class BenchResult:
    params: SystemParams
    reps: int
    ctmc_per_trial: float
    diffusion_per_trial: float
    setup_seconds: float  # ODE solve plus drift/noise tables, shared by all trials
    ctmc_events: list
    dt: float

    @property
    def speedup(self) -> float:
        return self.ctmc_per_trial / self.diffusion_per_trial

    @property
    def speedup_with_setup(self) -> float:
        return self.ctmc_per_trial / (self.diffusion_per_trial + self.setup_seconds / self.reps)

    def rows(self):
        return [
            {"method": "ctmc", "seconds_per_trial": self.ctmc_per_trial, "setup_seconds": 0.0},
            {"method": "diffusion", "seconds_per_trial": self.diffusion_per_trial, "setup_seconds": self.setup_seconds},
        ]

    def as_dict(self) -> dict:
        return {
            "reps": self.reps,
            "dt": self.dt,
            "rows": self.rows(),
            "speedup": self.speedup,
            "speedup_with_amortized_setup": self.speedup_with_setup,
            "ctmc_events": self.ctmc_events,
        }


def bench(params: SystemParams, trunc: TruncationConfig | None = None, reps: int = 10, seed: int = 0, dt: float = 0.1) -> BenchResult:
    """Mean wall-clock seconds per CTMC trial and per diffusion trial.

    One warm-up trial of each kind is run first and not timed.  Diffusion
    trials run one at a time against the shared coefficient tables; the
    time to build those tables is reported separately.
    """
    trunc = trunc or TruncationConfig()
    if reps < 3:
        raise ValidationError("bench needs at least 3 timed reps")
    init = CountVector.empty(params.n)
    simulate(params, init, [params.T], spawn_rng(seed, CTMC_STREAM, 10**9))

    events = []
    t0 = time.perf_counter()
    for r in range(reps):
        tr = simulate(params, init, [params.T], spawn_rng(seed, CTMC_STREAM, r))
        events.append(tr.events)
    ctmc = (time.perf_counter() - t0) / reps

    t0 = time.perf_counter()
    traj = fluid_for(params, trunc, dt)
    coeffs = sde_coefficients(traj, params, dt)
    setup = time.perf_counter() - t0
    x0 = np.zeros(coeffs.dim)
    simulate_sde(x0, None, params, dt=dt, seed=seed, reps=1, first_rep=10**9, keep_path=False, coeffs=coeffs)
    t0 = time.perf_counter()
    for r in range(reps):
        simulate_sde(x0, None, params, dt=dt, seed=seed, reps=1, first_rep=r, keep_path=False, coeffs=coeffs)
    diff = (time.perf_counter() - t0) / reps
    return BenchResult(params, reps, ctmc, diff, setup, events, dt)


def as_plain(obj):
    """Dataclasses and numpy scalars to JSON-friendly values."""
    if hasattr(obj, "__dataclass_fields__"):
        return as_plain(asdict(obj))
    if isinstance(obj, dict):
        return {k: as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [as_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
