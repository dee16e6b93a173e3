"""Command-line entry point.

Exit status: 0 success, 1 invalid input, 2 numerical failure, 3 I/O error.
Every subcommand is deterministic given its flags, config file and seed;
only the timing fields of ``bench`` vary between runs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from .core import NumericalError, SystemParams, TruncationConfig, ValidationError
from .ctmc import simulate
from .diffusion import simulate_sde
from .experiments import bench, fluid_for, provenance, run_coverage
from .rates import fixed_point_powerd, tail_sums
from .validation import covariation_check, lln_convergence_study

FULL_GRID = "2:1,3:1,3:2,4:1,4:2,4:3,5:1,5:2,5:3,5:4"
DESK_GRID = "2:1,3:2,5:4"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _json_text(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_config(path) -> dict:
    """Flat ``key = value`` file; keys are flag names without dashes."""
    out = {}
    with open(path) as fh:
        for num, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{num}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _add_model(p):
    p.add_argument("--n", type=int, default=10_000, help="number of servers")
    p.add_argument("--lambda", dest="lam", type=float, default=0.9, help="arrival rate per server")
    p.add_argument("--L", type=int, default=2, help="servers sampled per request")
    p.add_argument("--k", type=int, default=1, help="jobs per request")
    p.add_argument("--c", type=int, default=1, help="files per L-subset (recorded only)")
    p.add_argument("--T", type=float, default=10.0, help="time horizon")
    p.add_argument("--d", type=int, default=None, help="power-of-d shorthand: L=d, k=1")
    p.add_argument("--K", type=int, default=20, help="truncation level")
    p.add_argument("--leak-tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default=None, help="output file")
    p.add_argument("--config", default=None, help="key = value file; flags override it")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codedlb", description="Batch-sampling load balancing: exact chain, fluid limit and diffusion.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate-ctmc", help="exact chain trajectory as CSV")
    _add_model(p)
    p.add_argument("--sample-dt", type=float, default=0.1)
    p.add_argument("--engine", choices=("jit", "python"), default="jit")
    p.add_argument("--event-log", default=None, help="write every event to this CSV (python engine)")

    p = sub.add_parser("solve-ode", help="mean-field ODE trajectory as CSV")
    _add_model(p)
    p.add_argument("--h", type=float, default=0.01, help="RK4 step")
    p.add_argument("--grid-dt", type=float, default=0.1)

    p = sub.add_parser("simulate-sde", help="Euler-Maruyama fluctuation paths as CSV")
    _add_model(p)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--reps", type=int, default=1)

    p = sub.add_parser("coverage", help="CI coverage over an (L,k) grid")
    _add_model(p)
    p.add_argument("--grid", default=None, help=f'cells "L:k,..." (default "{DESK_GRID}")')
    p.add_argument("--reps-diff", type=int, default=None)
    p.add_argument("--reps-ctmc", type=int, default=None)
    p.add_argument("--ci-method", choices=("percentile", "normal"), default="percentile")
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--paper-scale", action="store_true", help="n=10000, 1000/1000 replicates, full grid")
    p.add_argument("--raw", default=None, help="per-replicate samples CSV")
    p.set_defaults(n=2000)

    p = sub.add_parser("bench", help="seconds per CTMC trial vs per diffusion trial")
    _add_model(p)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--dt", type=float, default=0.1)

    p = sub.add_parser("validate", help="LLN or covariation verdict as JSON")
    _add_model(p)
    p.add_argument("study", choices=("lln", "covariation"))
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--ns", default="100,1000,10000")
    p.add_argument("--window", type=float, default=0.0025)
    p.add_argument("--t0", type=float, default=5.0)
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(cfg) - known - {"lambda"})
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        if "lambda" in cfg:
            cfg["lam"] = cfg.pop("lambda")
        # config values become defaults, so explicit flags still win
        typed = {}
        for a in sp._actions:
            if a.dest in cfg:
                raw = cfg[a.dest]
                if a.type is not None:
                    typed[a.dest] = a.type(raw)
                elif isinstance(a.const, bool):
                    typed[a.dest] = raw.lower() in ("1", "true", "yes", "on")
                else:
                    typed[a.dest] = raw
        sp.set_defaults(**typed)
        args = parser.parse_args(argv)
    return args


def _params(args) -> SystemParams:
    if args.lam <= 0:
        raise ValidationError("lambda must be positive")
    L, k = (args.d, 1) if args.d is not None else (args.L, args.k)
    return SystemParams(n=args.n, lam=args.lam, L=L, k=k, c=args.c, T=args.T)


def _merged(args) -> dict:
    skip = {"config", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _out(args, default: str) -> Path:
    return Path(args.output or default)


def _grid(spec: str):
    cells = []
    for item in spec.split(","):
        try:
            L, k = (int(v) for v in item.split(":"))
        except ValueError:
            raise ValidationError(f"bad grid cell {item!r}; expected L:k") from None
        cells.append((L, k))
    return tuple(cells)


def _sample_grid(T: float, dt: float) -> np.ndarray:
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValidationError(f"step {dt} must divide T={T}")
    return np.round(np.arange(steps + 1) * dt, 12)


def cmd_simulate_ctmc(args) -> int:
    params = _params(args)
    times = _sample_grid(params.T, args.sample_dt)
    record = args.event_log is not None
    engine = "python" if record else args.engine
    tr = simulate(params, None, times, np.random.default_rng(np.random.SeedSequence(args.seed)), engine, record_events=record)
    out = _out(args, "ctmc.csv")
    empty, large, mean_len = tr.metrics()
    top = int(np.flatnonzero(tr.snapshots.any(axis=0))[-1])
    header = ["time"] + [f"level_{j}" for j in range(top + 1)] + ["empty_count", "large_count", "mean_len"]
    rows = []
    for i, t in enumerate(times):
        rows.append([float(t)] + [int(v) for v in tr.snapshots[i, : top + 1]] + [int(empty[i]), int(large[i]), float(mean_len[i])])
    atomic_write(out, _csv_text(header, rows))
    if record:
        ev_rows = [
            [e.t, e.kind, " ".join(map(str, e.config.levels)) if e.config else "", e.level, e.jobs_total]
            for e in tr.log
        ]
        atomic_write(args.event_log, _csv_text(["time", "kind", "sampled_levels", "departure_level", "jobs_total"], ev_rows))
    meta = provenance(params, None, config=_merged(args), events=tr.events,
                      seeding="default_rng(SeedSequence(seed))", engine=engine)
    atomic_write(str(out) + ".json", _json_text(meta))
    return 0


def cmd_solve_ode(args) -> int:
    params = _params(args)
    trunc = TruncationConfig(args.K, args.leak_tol)
    traj = fluid_for(params, trunc, args.grid_dt, args.h)
    out = _out(args, "ode.csv")
    header = ["time"] + [f"pi_{j}" for j in range(trunc.K + 1)] + ["leak"]
    rows = [[t, *row, lk] for t, row, lk in zip(traj.times, traj.probs, traj.leak)]
    atomic_write(out, _csv_text(header, rows))
    v = tail_sums(traj.probs[-1], float(traj.leak[-1]))
    meta = provenance(params, trunc, config=_merged(args),
                      step_doubling_error=traj.doubling_error, mass_drift=traj.mass_drift,
                      clamped=traj.clamped, tail_sums_at_T=v[:8].tolist())
    if params.k == 1:
        fp = fixed_point_powerd(params.L, params.lam, trunc.K)
        vstar = tail_sums(fp.probs)
        meta["fixed_point_tail_sums"] = vstar[:8].tolist()
        meta["max_tail_gap_m_le_4"] = float(np.abs(v[1:5] - vstar[1:5]).max())
    atomic_write(str(out) + ".json", _json_text(meta))
    return 0


def cmd_simulate_sde(args) -> int:
    params = _params(args)
    trunc = TruncationConfig(args.K, args.leak_tol)
    traj = fluid_for(params, trunc, args.dt, args.h)
    sde = simulate_sde(np.zeros(trunc.K + 1), traj, params, trunc, dt=args.dt, seed=args.seed, reps=args.reps)
    out = _out(args, "sde.csv")
    coords = [f"x_{j}" for j in range(trunc.K + 1)]
    if args.reps == 1:
        header = ["time"] + coords
        rows = [[t, *x] for t, x in zip(sde.times, sde.paths[0])]
    else:
        header = ["replicate", "time"] + coords
        rows = [[r, t, *x] for r in range(args.reps) for t, x in zip(sde.times, sde.paths[r])]
    atomic_write(out, _csv_text(header, rows))
    meta = provenance(params, trunc, config=_merged(args),
                      max_projection=float(sde.projection.max(initial=0.0)), truncation_dominated=sde.flagged,
                      seeding="replicate r uses SeedSequence(seed, spawn_key=(0, r))")
    atomic_write(str(out) + ".json", _json_text(meta))
    return 0


def cmd_coverage(args) -> int:
    if args.paper_scale:
        n, reps_d, reps_c, grid = 10_000, 1000, 1000, FULL_GRID
    else:
        n, reps_d, reps_c, grid = args.n, 200, 200, DESK_GRID
    args.n = n
    args.reps_diff = args.reps_diff or reps_d
    args.reps_ctmc = args.reps_ctmc or reps_c
    args.grid = args.grid or grid
    cells = _grid(args.grid)
    params = _params(args)
    for L, k in cells:
        params.replace(L=L, k=k)  # validate every cell before running any
    trunc = TruncationConfig(args.K, args.leak_tol)
    rep = run_coverage(params, trunc, args.reps_diff, args.reps_ctmc, args.seed, args.ci_method,
                       cells, args.dt, args.h, args.jobs, keep_samples=args.raw is not None)
    rep.config = _merged(args)
    out = _out(args, "coverage.csv")
    atomic_write(out, rep.to_csv())
    atomic_write(str(out) + ".json", rep.to_json())
    if args.raw:
        atomic_write(args.raw, rep.raw_csv())
    return 0


def cmd_bench(args) -> int:
    params = _params(args)
    trunc = TruncationConfig(args.K, args.leak_tol)
    res = bench(params, trunc, args.reps, args.seed, args.dt)
    out = _out(args, "bench.csv")
    rows = [[r["method"], r["seconds_per_trial"], r["setup_seconds"]] for r in res.rows()]
    rows.append(["speedup", res.speedup, res.speedup_with_setup])
    atomic_write(out, _csv_text(["method", "seconds_per_trial", "setup_seconds"], rows))
    meta = provenance(params, trunc, config=_merged(args), ctmc_events=res.ctmc_events,
                      timing=res.as_dict(), timing_fields_are_not_reproducible=True)
    atomic_write(str(out) + ".json", _json_text(meta))
    return 0


def cmd_validate(args) -> int:
    params = _params(args)
    if args.study == "lln":
        ns = [int(v) for v in args.ns.split(",")]
        tab = lln_convergence_study(ns, params, args.reps or 20, args.seed, args.K)
        verdict = tab.verdict
        detail = {"ns": tab.ns, "mean_error": tab.mean_error, "se": tab.se, "slope": tab.slope}
    else:
        tab = covariation_check(params, args.window, args.reps or 5000, args.seed, args.t0, K=args.K)
        verdict = tab.verdict
        detail = {"max_z": verdict.statistic, "estimate": tab.estimate, "target": tab.target, "sigma": tab.sigma}
    doc = dict(verdict.as_dict(), details=detail, provenance=provenance(params, None, config=_merged(args)))
    atomic_write(_out(args, f"{args.study}.json"), _json_text(doc))
    return 0 if verdict.passed else 1


COMMANDS = {
    "simulate-ctmc": cmd_simulate_ctmc,
    "solve-ode": cmd_solve_ode,
    "simulate-sde": cmd_simulate_sde,
    "coverage": cmd_coverage,
    "bench": cmd_bench,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(f"codedlb: error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, ValueError) as exc:
        print(f"codedlb: invalid input: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"codedlb: I/O error: {exc}", file=sys.stderr)
        return 3
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ValueError) as exc:
        print(f"codedlb: invalid input: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"codedlb: numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"codedlb: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
