"""Command-line experiment driver.

Subcommands
-----------
assemble  write the problem container ``<prefix>.problem.rlr``
solve     run one solver; writes ``<prefix>.history.csv`` and ``<prefix>.summary.json``
compare   errors of several solvers against the snapshot oracle; ``<prefix>.compare.csv``
svdecay   weighted singular values of the oracle snapshot; ``<prefix>.svdecay.csv``

All subcommands accept ``--config PATH --seed INT --threads INT --out DIR
--full-scale``.  ``--seed`` replaces ``problem.seed``; ``--out`` replaces
``output.dir``.  Exit status: 0 success, 2 configuration error, 3 solver
stall (history up to the stall is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigError, SolverError
from .fem import build_problem
from .io import load_problem, save_problem, save_snapshot
from .linalg import weighted_truncated_svd
from .objective import ObjectiveConfig
from .optimizers import ConvergenceRecord, RcgConfig, random_point, rank_adaptive_solve, rcg_solve, rtr_solve
from .problem import ProblemData
from .reference import best_rank_error, relative_error, singular_decay, solve_snapshot

__all__ = ["main", "build_parser", "cmd_assemble", "cmd_solve", "cmd_compare", "cmd_svdecay"]

log = logging.getLogger("riemlowrank")

COMPARE_COLUMNS = ("rank", "method", "iterations", "seconds", "e_method", "e_star")
SVDECAY_COLUMNS = ("index", "sigma", "sigma_rel", "e_star")


class Run:
    """Resolved config plus output location for one invocation."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int = 1):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, suffix):
        prefix = self.cfg.output.prefix or self.cfg.name
        return self.out / f"{prefix}.{suffix}"


def _problem(run: Run) -> ProblemData:
    pb = run.cfg.problem
    if pb.container and Path(pb.container).exists():
        P = load_problem(pb.container)
        if P.meta.get("seed") != pb.seed:
            log.warning("container seed %s differs from config seed %s", P.meta.get("seed"), pb.seed)
        return P
    return build_problem(pb.N, pb.p, pb.n, seed=pb.seed, nonlinear=pb.nonlinear,
                         compression_tol=pb.rhs_tol, rank_cap=pb.rhs_rank_cap)


def _start_point(P: ProblemData, metric_mode: str, rank: int, seed: int):
    """Random initial point, drawn in the preconditioned metric and re-factored if needed.

    Both metrics therefore start from the same ambient matrix.
    """
    X0 = random_point(P.metric("preconditioned"), rank, np.random.default_rng([seed, rank]))
    if metric_mode == "preconditioned":
        return X0
    return weighted_truncated_svd(X0.factored(), P.metric(metric_mode), rank=rank)


def _warmup(P: ProblemData, X0, tol, metric_mode):
    """Approximate minimizer of the quadratic part (the nonlinear solvers start there)."""
    X, rec = rcg_solve(P.linear_part(), X0, RcgConfig(tol=tol), ObjectiveConfig(metric=metric_mode))
    return X, rec.meta.get("iterations", 0)


def _run_solver(P, cfg: ExperimentConfig, method, rank, obj_cfg: ObjectiveConfig):
    """Returns ``(X, record, status, counts)``; a stall keeps the partial record."""
    sb = cfg.solver
    counts = {"warmup_linear_iterations": 0}
    try:
        if method == "rank-adaptive":
            ra = sb.rank_adaptive.build(sb.rcg, sb.rtr)
            X0 = _start_point(P, obj_cfg.metric, ra.r0, cfg.init_seed)
            X, rec = rank_adaptive_solve(P, ra, obj_cfg, X0=X0)
        else:
            X0 = _start_point(P, obj_cfg.metric, rank, cfg.init_seed)
            if P.nonlinearity.active and sb.warmup_linear_tol is not None:
                X0, counts["warmup_linear_iterations"] = _warmup(P, X0, sb.warmup_linear_tol, obj_cfg.metric)
            if method == "rcg":
                X, rec = rcg_solve(P, X0, sb.rcg.build(), obj_cfg)
            else:
                X, rec = rtr_solve(P, X0, sb.rtr.build(), obj_cfg)
        status = "converged" if rec.meta.get("converged") else "max_iter"
    except SolverError as exc:
        log.error("solver stalled: %s", exc)
        X, rec, status = exc.point, exc.record, f"stalled: {exc}"
    return X, rec, status, counts


def _oracle(run: Run, P, rtol):
    t = time.perf_counter()
    S = solve_snapshot(P, rtol=rtol, threads=run.threads)
    secs = time.perf_counter() - t
    bad = np.nonzero(~S.converged)[0]
    if bad.size:
        log.warning("oracle failed on %d sample(s): %s", bad.size, bad[:20].tolist())
    return S, secs, bad


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path, data):
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path, columns, rows):
    """UTF-8 CSV; floats written with ``repr`` so they parse back exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# subcommands ==============================================================
def cmd_assemble(run: Run) -> Path:
    P = _problem(run)
    path = run.path("problem.rlr")
    save_problem(path, P)
    log.info("wrote %s (m=%d, n=%d, p=%d)", path, P.m, P.n, P.p)
    return path


def cmd_solve(run: Run) -> int:
    cfg = run.cfg
    P = _problem(run)
    obj_cfg = cfg.objective_config()
    t = time.perf_counter()
    X, rec, status, counts = _run_solver(P, cfg, cfg.solver.method, cfg.solver.rank, obj_cfg)
    secs = time.perf_counter() - t
    rec.to_csv(run.path("history.csv"))
    last = rec.last or {}
    summary = {
        "name": cfg.name,
        "config": cfg.model_dump(),
        "m": P.m, "n": P.n, "p": P.p,
        "method": cfg.solver.method,
        "metric": obj_cfg.metric,
        "nonlinearity": obj_cfg.nonlinearity if P.nonlinearity.active else "none",
        "status": status,
        "rank": X.rank,
        "iterations": rec.meta.get("iterations"),
        "warmup_iterations": rec.meta.get("warmup_iterations", 0),
        "inner_total": rec.meta.get("inner_total", 0),
        "history_rows": len(rec),
        "grad_P_norm": last.get("grad_P_norm"),
        "residual": last.get("residual"),
        "functional": last.get("functional"),
        "tolerance": _tolerance(cfg),
        "solver_meta": {k: v for k, v in rec.meta.items() if k not in ("iterations",)},
        **counts,
        "timing": {"solve_seconds": secs},
    }
    if cfg.solver.oracle:
        S, osecs, bad = _oracle(run, P, cfg.compare.oracle_rtol if cfg.compare else 1e-12)
        spec = S.spectrum(P.metric("preconditioned"))
        summary["e_method"] = relative_error(S, X, P.metric("preconditioned"))
        summary["e_star"] = best_rank_error(spec, X.rank)
        summary["oracle_failed_samples"] = bad.tolist()
        summary["oracle_mean_iterations"] = float(S.iterations.mean())
        summary["timing"]["oracle_seconds"] = osecs
    _write_json(run.path("summary.json"), summary)
    return 0 if not status.startswith("stalled") else 3


def _tolerance(cfg: ExperimentConfig):
    sb = cfg.solver
    if sb.method == "rcg":
        return {"tol": sb.rcg.tol, "relative": sb.rcg.relative}
    if sb.method == "rtr":
        return {"tol": sb.rtr.tol, "relative": sb.rtr.relative}
    return {"tol": sb.rank_adaptive.tol, "relative": sb.rank_adaptive.relative}


def cmd_compare(run: Run) -> int:
    cfg = run.cfg
    if cfg.compare is None:
        raise ConfigError("compare needs a `compare` block")
    P = _problem(run)
    spec, bad, osecs, S = None, np.array([], dtype=int), 0.0, None
    if cfg.compare.oracle:
        S, osecs, bad = _oracle(run, P, cfg.compare.oracle_rtol)
        save_snapshot(run.path("snapshot.rlr"), S)
        spec = S.spectrum(P.metric("preconditioned"))
    rows, stalled = [], False
    for r in cfg.compare.ranks:
        for meth in cfg.compare.methods:
            obj_cfg = cfg.objective_config(meth.metric, meth.compression)
            t = time.perf_counter()
            X, rec, status, counts = _run_solver(P, cfg, meth.solver, r, obj_cfg)
            secs = time.perf_counter() - t
            stalled |= status.startswith("stalled")
            its = rec.meta.get("iterations", 0)
            e_m = relative_error(S, X, P.metric("preconditioned")) if S is not None else float("nan")
            e_s = best_rank_error(spec, r) if spec is not None else float("nan")
            rows.append((r, meth.label, its, secs, e_m, e_s))
            log.info("rank %d %s: %d iterations, e=%.3e, e*=%.3e (%s)", r, meth.label, its, e_m, e_s, status)
    write_csv(run.path("compare.csv"), COMPARE_COLUMNS, rows)
    _write_json(run.path("compare.json"), {
        "name": cfg.name, "m": P.m, "n": P.n, "p": P.p,
        "oracle_failed_samples": bad.tolist(),
        "oracle_mean_iterations": float(S.iterations.mean()) if S is not None else None,
        "timing": {"oracle_seconds": osecs},
    })
    return 3 if stalled else 0


def cmd_svdecay(run: Run) -> int:
    cfg = run.cfg
    P = _problem(run)
    S, osecs, bad = _oracle(run, P, cfg.svdecay.oracle_rtol)
    spec = S.spectrum(P.metric("preconditioned"))
    rel, expo = singular_decay(spec, (cfg.svdecay.fit_from, cfg.svdecay.fit_to))
    rows = [(k + 1, float(spec[k]), float(rel[k]), best_rank_error(spec, k + 1)) for k in range(spec.size)]
    write_csv(run.path("svdecay.csv"), SVDECAY_COLUMNS, rows)
    _write_json(run.path("svdecay.json"), {
        "name": cfg.name, "m": P.m, "n": P.n, "p": P.p, "decay_exponent": expo,
        "fit_range": [cfg.svdecay.fit_from, cfg.svdecay.fit_to],
        "oracle_failed_samples": bad.tolist(), "timing": {"oracle_seconds": osecs},
    })
    return 0


COMMANDS = {"assemble": cmd_assemble, "solve": cmd_solve, "compare": cmd_compare, "svdecay": cmd_svdecay}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riemlowrank", description="Low-rank Riemannian solvers for parametrized systems.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="YAML experiment file")
        p.add_argument("--seed", type=int, default=None, help="overrides problem.seed")
        p.add_argument("--threads", type=int, default=1, help="threads for oracle column blocks")
        p.add_argument("--out", type=Path, default=None, help="overrides output.dir")
        p.add_argument("--full-scale", action="store_true", help="allow presets marked full_scale")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if cfg.full_scale and not args.full_scale:
            raise ConfigError(f"{args.config} is a full-scale preset; pass --full-scale to run it")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        run = Run(cfg, args.out if args.out is not None else Path(cfg.output.dir), args.threads)
        result = COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return result if isinstance(result, int) else 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
