"""Riemannian solvers on the fixed-rank manifold and the rank-adaptive driver."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import (
    InvariantViolation,
    LineSearchStalled,
    RankExhausted,
    SolverError,
    TrustRegionStalled,
)
from .linalg import FactoredAmbient, FixedRankPoint, Metric, weighted_truncated_svd
from .manifold import TangentVector, inner, norm, project_normal, retract, transport
from .objective import Objective, ObjectiveConfig, quad_curvature
from .problem import ProblemData

log = logging.getLogger(__name__)

__all__ = [
    "RcgConfig",
    "RtrConfig",
    "RankAdaptiveConfig",
    "ConvergenceRecord",
    "random_point",
    "fletcher_reeves_beta",
    "armijo_linesearch",
    "rcg_solve",
    "tcg_subproblem",
    "rtr_solve",
    "normal_correction",
    "rank_adaptive_solve",
]


# configuration ==============================================================
@dataclass(frozen=True)
class RcgConfig:
    """Riemannian conjugate gradients with Armijo backtracking.

    ``tol`` bounds the metric norm of the Riemannian gradient; with
    ``relative=True`` it is scaled by the initial norm.  ``armijo_slack``
    (relative to ``max(1, |f|)``) lets the sufficient-decrease test absorb
    rounding errors in the functional once the decrease itself is at that
    level; without it gradients much below ``sqrt(eps)`` are unreachable.
    ``powell_restart`` resets the direction to the negative gradient when
    consecutive gradients are far from orthogonal,
    ``|<g_new, T(g_old)>| >= powell_restart * ||g_new||^2``; this prevents the
    tiny-step jamming Fletcher-Reeves is prone to.  ``None`` disables it.
    """

    tol: float = 1e-6
    max_iter: int = 1000
    c: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 50
    relative: bool = False
    alpha_min: float = 1e-8
    alpha_max: float = 1e8
    armijo_slack: float = 1e-13
    powell_restart: float | None = 0.2

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0 < self.c < 1:
            raise ValueError("Armijo constant must lie in (0, 1)")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


@dataclass(frozen=True)
class RtrConfig:
    tol: float = 1e-6
    max_iter: int = 500
    delta0: float = 1.0
    delta_max: float = 1e3
    accept: float = 0.05
    expand: float = 0.75
    shrink: float = 0.25
    kappa: float = 0.1
    theta: float = 1.0
    max_inner: int = 500
    warmup_tol: float | None = 1e-3
    relative: bool = False

    def __post_init__(self):
        if not 0 < self.delta0 < self.delta_max:
            raise ValueError("need 0 < delta0 < delta_max")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass(frozen=True)
class RankAdaptiveConfig:
    """Outer loop: fixed-rank solves, rank reduction and normal-correction rank increase.

    A fixed-rank phase ends once the Riemannian gradient norm drops below
    ``inner_rel`` times the full gradient norm (the tangent part is then
    negligible against the normal part), or below ``tol / 10`` in the
    normalization of the outer residual, or after the inner solver's
    ``max_iter`` iterations.
    """

    r0: int = 5
    r_up: int = 5
    tol: float = 1e-6
    eps: float = 1e-14
    relative: bool = True
    solver: str = "rcg"
    inner: RcgConfig | RtrConfig = field(default_factory=RcgConfig)
    inner_rel: float = 0.1
    max_outer: int = 100

    def __post_init__(self):
        if self.r0 < 1 or self.r_up < 1:
            raise ValueError("r0 and r_up must be at least 1")
        if self.tol <= 0 or self.eps <= 0:
            raise ValueError("tol and eps must be positive")
        if self.solver not in ("rcg", "rtr"):
            raise ValueError(f"unknown inner solver {self.solver!r}")


# convergence history ========================================================
class ConvergenceRecord:
    """Per-iteration solver log.

    Columns: iteration, grad_P_norm (Riemannian gradient), residual (full
    metric gradient), functional, rank, step (step size or radius),
    inner_iters, seconds (elapsed since the record started).
    """

    columns = (
        "iteration",
        "grad_P_norm",
        "residual",
        "functional",
        "rank",
        "step",
        "inner_iters",
        "seconds",
    )
    _types = (int, float, float, float, int, float, int, float)

    def __init__(self):
        self.rows: list[tuple] = []
        self.meta: dict = {}
        self._t0 = time.perf_counter()

    def __len__(self):
        return len(self.rows)

    @property
    def next_iteration(self):
        return self.rows[-1][0] + 1 if self.rows else 0

    def append(self, iteration, grad_norm, residual, functional, rank, step=0.0, inner_iters=0, seconds=None):
        if self.rows and iteration <= self.rows[-1][0]:
            raise InvariantViolation("iteration indices must increase")
        if seconds is None:
            seconds = time.perf_counter() - self._t0
        self.rows.append(
            (int(iteration), float(grad_norm), float(residual), float(functional),
             int(rank), float(step), int(inner_iters), float(seconds))
        )

    def column(self, name):
        i = self.columns.index(name)
        return np.array([row[i] for row in self.rows])

    @property
    def last(self):
        return dict(zip(self.columns, self.rows[-1])) if self.rows else None

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    @classmethod
    def from_csv(cls, path):
        rec = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != cls.columns:
                raise ValueError(f"unexpected header {header}")
            for row in reader:
                rec.rows.append(tuple(t(v) for t, v in zip(cls._types, row)))
        return rec


def random_point(metric: Metric, r: int, rng, scale: float = 1.0) -> FixedRankPoint:
    """Random rank-``r`` point with metric norm ``scale``."""
    m, n = metric.m, metric.n
    Z = FactoredAmbient(rng.standard_normal((m, r)), rng.standard_normal((n, r)))
    X = weighted_truncated_svd(Z, metric, rank=r)
    s = X.s * (scale / np.linalg.norm(X.s))
    return FixedRankPoint(X.U, s, X.V, metric)


# line search ===============================================================
def fletcher_reeves_beta(grad_new_norm: float, grad_old_norm: float) -> float:
    if grad_old_norm <= 0:
        raise InvariantViolation("previous gradient norm is zero; the solver should have stopped")
    return (grad_new_norm / grad_old_norm) ** 2


def armijo_linesearch(
    phi: Callable[[float], float],
    f0: float,
    g0: float,
    alpha0: float,
    c: float = 1e-4,
    backtrack: float = 0.5,
    max_backtracks: int = 50,
    slack: float = 0.0,
):
    """Backtracking until ``phi(alpha) <= f0 + c alpha g0 + slack``.

    Returns
    -------
    alpha : float
        ``alpha0 * backtrack**k`` for the smallest admissible ``k``.
    evaluations : int
    """
    if not g0 < 0:
        raise InvariantViolation(f"not a descent direction (slope {g0:.3e})")
    alpha = float(alpha0)
    for k in range(max_backtracks + 1):
        if phi(alpha) <= f0 + c * alpha * g0 + slack:
            return alpha, k + 1
        alpha *= backtrack
    raise LineSearchStalled(f"no sufficient decrease after {max_backtracks} backtracks")


# RCG =======================================================================
def _log_row(record, obj, X, it, gnorm, step, inner_iters):
    record.append(it, gnorm, obj.residual(X), obj.value(X), X.rank, step, inner_iters)


def rcg_solve(
    P: ProblemData,
    X0: FixedRankPoint,
    cfg: RcgConfig = RcgConfig(),
    obj_cfg: ObjectiveConfig = ObjectiveConfig(),
    *,
    record: ConvergenceRecord | None = None,
    point_hook: Callable[[FixedRankPoint], FixedRankPoint] | None = None,
    stop: Callable[[FixedRankPoint, float, Objective], bool] | None = None,
    objective: Objective | None = None,
):
    """Riemannian conjugate gradients with Fletcher-Reeves updates.

    The first trial step is the minimizer of the quadratic part of ``F``
    along the search direction.  ``point_hook`` may replace each accepted
    iterate (the rank-adaptive driver uses it to drop ranks); ``stop`` is an
    extra termination test evaluated after each iteration.

    Returns
    -------
    (FixedRankPoint, ConvergenceRecord)
    """
    obj = objective or Objective(P, obj_cfg)
    record = ConvergenceRecord() if record is None else record
    X = X0
    g = obj.rgrad(X)
    gn = norm(X, g)
    tol = cfg.tol * (gn if cfg.relative else 1.0)
    it = record.next_iteration
    _log_row(record, obj, X, it, gn, 0.0, 0)
    record.meta.setdefault("converged", False)
    n_iter = 0
    if gn <= tol or (stop is not None and stop(X, gn, obj)):
        record.meta["converged"] = gn <= tol
        record.meta["iterations"] = record.meta.get("iterations", 0)
        return X, record
    xi = -g
    for n_iter in range(1, cfg.max_iter + 1):
        slope = inner(X, g, xi)
        if slope >= 0:
            xi = -g
            slope = -gn * gn
        curv = quad_curvature(P, xi)
        alpha0 = -slope / curv if curv > 0 else 1.0
        alpha0 = float(np.clip(alpha0, cfg.alpha_min, cfg.alpha_max))
        f0 = obj.value(X)
        trial = {}

        def phi(alpha):
            Y = retract(X, xi * alpha)
            trial["X"] = Y
            return obj.value(Y)

        try:
            alpha, _ = armijo_linesearch(
                phi, f0, slope, alpha0, cfg.c, cfg.backtrack, cfg.max_backtracks,
                cfg.armijo_slack * max(1.0, abs(f0)),
            )
        except LineSearchStalled as exc:
            record.meta["iterations"] = record.meta.get("iterations", 0) + n_iter - 1
            raise LineSearchStalled(str(exc), point=X, record=record) from None
        X_new = trial["X"]
        if point_hook is not None:
            X_new = point_hook(X_new)
        g_new = obj.rgrad(X_new)
        gn_new = norm(X_new, g_new)
        beta = fletcher_reeves_beta(gn_new, gn)
        if cfg.powell_restart is not None:
            if abs(inner(X_new, g_new, transport(X_new, g))) >= cfg.powell_restart * gn_new**2:
                beta = 0.0
        xi = -g_new + transport(X_new, xi) * beta
        X, g, gn = X_new, g_new, gn_new
        it += 1
        _log_row(record, obj, X, it, gn, alpha, 0)
        if gn <= tol:
            record.meta["converged"] = True
            break
        if stop is not None and stop(X, gn, obj):
            break
    record.meta["iterations"] = record.meta.get("iterations", 0) + n_iter
    return X, record


# RTR =======================================================================
def tcg_subproblem(
    grad: TangentVector,
    hess_apply: Callable[[TangentVector], TangentVector],
    Delta: float,
    kappa: float = 0.1,
    theta: float = 1.0,
    max_inner: int = 500,
):
    """Steihaug-Toint truncated CG for ``min <g, e> + 1/2 <H e, e>`` over ``||e|| <= Delta``.

    Returns
    -------
    eta : TangentVector
    info : dict
        ``status`` (``"converged"``, ``"negative_curvature"``,
        ``"exceeded_radius"``, ``"max_inner"``, ``"model_increased"``),
        ``inner_iters``, ``Heta`` and ``model_decrease``.
    """
    if Delta <= 0:
        raise ValueError("trust-region radius must be positive")
    X = grad.point
    eta = TangentVector.zeros(X)
    Heta = TangentVector.zeros(X)
    r = grad
    rr = inner(X, r, r)
    r0 = np.sqrt(rr)
    delta = -r
    e_Pe, e_Pd, d_Pd = 0.0, 0.0, rr
    model = 0.0
    status = "max_inner"
    j = 0
    if r0 == 0:
        return eta, {"status": "converged", "inner_iters": 0, "Heta": Heta, "model_decrease": 0.0}
    stop_at = r0 * min(kappa, r0**theta)
    for j in range(1, max_inner + 1):
        Hd = hess_apply(delta)
        dHd = inner(X, delta, Hd)
        alpha = rr / dHd if dHd != 0 else np.inf
        e_Pe_new = e_Pe + 2 * alpha * e_Pd + alpha * alpha * d_Pd
        if dHd <= 0 or e_Pe_new >= Delta**2:
            tau = (-e_Pd + np.sqrt(e_Pd * e_Pd + d_Pd * (Delta**2 - e_Pe))) / d_Pd
            eta = eta.axpy(tau, delta)
            Heta = Heta.axpy(tau, Hd)
            status = "negative_curvature" if dHd <= 0 else "exceeded_radius"
            model = inner(X, grad, eta) + 0.5 * inner(X, Heta, eta)
            break
        new_eta = eta.axpy(alpha, delta)
        new_Heta = Heta.axpy(alpha, Hd)
        new_model = inner(X, grad, new_eta) + 0.5 * inner(X, new_Heta, new_eta)
        if new_model > model:
            status = "model_increased"
            break
        eta, Heta, model, e_Pe = new_eta, new_Heta, new_model, e_Pe_new
        r = r.axpy(alpha, Hd)
        rr_old, rr = rr, inner(X, r, r)
        if np.sqrt(rr) <= stop_at:
            status = "converged"
            break
        beta = rr / rr_old
        delta = delta * beta - r
        e_Pd = beta * (e_Pd + alpha * d_Pd)
        d_Pd = rr + beta * beta * d_Pd
    return eta, {"status": status, "inner_iters": j, "Heta": Heta, "model_decrease": -model}


def rtr_solve(
    P: ProblemData,
    X0: FixedRankPoint,
    cfg: RtrConfig = RtrConfig(),
    obj_cfg: ObjectiveConfig = ObjectiveConfig(),
    *,
    record: ConvergenceRecord | None = None,
    point_hook: Callable[[FixedRankPoint], FixedRankPoint] | None = None,
    stop: Callable[[FixedRankPoint, float, Objective], bool] | None = None,
    objective: Objective | None = None,
):
    """Riemannian trust-region method with tCG subproblem solves.

    With ``cfg.warmup_tol`` set, RCG iterations first bring the gradient norm
    below that value; ``record.meta["warmup_iterations"]`` counts them and
    ``record.meta["iterations"]`` counts trust-region iterations only.
    ``record.meta["rho"]`` lists the actual-to-predicted reduction ratios.
    """
    obj = objective or Objective(P, obj_cfg)
    record = ConvergenceRecord() if record is None else record
    X = X0
    g = obj.rgrad(X)
    gn = norm(X, g)
    tol = cfg.tol * (gn if cfg.relative else 1.0)
    record.meta.setdefault("warmup_iterations", 0)
    if cfg.warmup_tol is not None and gn > max(cfg.warmup_tol, tol):
        wcfg = RcgConfig(tol=max(cfg.warmup_tol, tol), max_iter=cfg.max_iter)
        X, record = rcg_solve(P, X, wcfg, obj_cfg, record=record, point_hook=point_hook, objective=obj)
        record.meta["warmup_iterations"] += record.meta.pop("iterations", 0)
        record.meta.pop("converged", None)
        g = obj.rgrad(X)
        gn = norm(X, g)
    else:
        _log_row(record, obj, X, record.next_iteration, gn, cfg.delta0, 0)
    it = record.rows[-1][0]
    Delta = cfg.delta0
    n_iter = 0
    record.meta["converged"] = gn <= tol
    record.meta["inner_total"] = record.meta.get("inner_total", 0)
    if gn <= tol or (stop is not None and stop(X, gn, obj)):
        record.meta["iterations"] = record.meta.get("iterations", 0)
        return X, record
    for n_iter in range(1, cfg.max_iter + 1):
        fx = obj.value(X)
        eta, info = tcg_subproblem(
            g, lambda H: obj.hess(X, H), Delta, cfg.kappa, cfg.theta, cfg.max_inner
        )
        record.meta["inner_total"] += info["inner_iters"]
        eta_norm = norm(X, eta)
        X_trial = retract(X, eta)
        f_trial = obj.value(X_trial)
        reg = 1e3 * np.finfo(float).eps * max(1.0, abs(fx))
        rho = (fx - f_trial + reg) / (info["model_decrease"] + reg)
        record.meta.setdefault("rho", []).append(float(rho))
        on_boundary = info["status"] in ("negative_curvature", "exceeded_radius")
        if rho < cfg.shrink:
            Delta = cfg.shrink * eta_norm
        elif rho > cfg.expand and on_boundary:
            Delta = min(2 * Delta, cfg.delta_max)
        if rho >= cfg.accept:
            X = X_trial if point_hook is None else point_hook(X_trial)
            g = obj.rgrad(X)
            gn = norm(X, g)
        it += 1
        _log_row(record, obj, X, it, gn, Delta, info["inner_iters"])
        if gn <= tol:
            record.meta["converged"] = True
            break
        if stop is not None and stop(X, gn, obj):
            break
        if Delta < 1e-14 * cfg.delta_max:
            record.meta["iterations"] = record.meta.get("iterations", 0) + n_iter
            raise TrustRegionStalled(
                f"trust-region radius collapsed to {Delta:.3e}", point=X, record=record
            )
    record.meta["iterations"] = record.meta.get("iterations", 0) + n_iter
    return X, record


# rank adaptivity ==========================================================
def normal_correction(P: ProblemData, X: FixedRankPoint, r_up: int, objective: Objective | None = None):
    """Rank-``r_up`` normal step ``Y*`` and its quadratic-part optimal length ``alpha*``.

    ``Y*`` is the best rank-``r_up`` approximation of the normal component of
    the negative metric gradient; ``alpha* = ||Y*||^2 / sum_i <A_i Y* Xi_i, Y*>_F``.
    """
    obj = objective or Objective(P, ObjectiveConfig(metric=X.metric.name))
    N = project_normal(X, -obj.egrad(X))
    m, n = X.shape
    scale = X.metric.norm(obj.egrad(X))
    Y = weighted_truncated_svd(N, X.metric, rank=r_up) if N.width else None
    if Y is None or Y.rank == 0 or np.linalg.norm(Y.s) <= 1e-14 * max(scale, 1e-300):
        return FactoredAmbient.zeros(m, n), 0.0
    Yf = Y.factored()
    curv = quad_curvature(P, Yf)
    alpha = float(np.sum(Y.s**2) / curv) if curv > 0 else 0.0
    return Yf, alpha


def _reduce_rank(X: FixedRankPoint, eps: float):
    s2 = X.s**2
    total = s2.sum()
    if X.rank <= 1 or total == 0 or s2[-1] / total >= eps:
        return X
    tail = np.cumsum(s2[::-1])[::-1] / total  # tail[k] = sum_{i>=k} s_i^2 (0-based)
    ks = [k for k in range(1, X.rank) if tail[k] >= eps]
    return X.truncate(max(ks) if ks else 1)


def rank_adaptive_solve(
    P: ProblemData,
    cfg: RankAdaptiveConfig = RankAdaptiveConfig(),
    obj_cfg: ObjectiveConfig = ObjectiveConfig(),
    X0: FixedRankPoint | None = None,
    seed: int = 0,
):
    """Increase the rank by normal corrections until the full gradient is small.

    The residual is the metric norm of the (unprojected) gradient, scaled by
    its initial value when ``cfg.relative``.  ``record.meta["plateaus"]``
    lists ``(rank, residual)`` at the end of each fixed-rank phase.
    """
    obj = Objective(P, obj_cfg)
    metric = obj.metric
    if X0 is None:
        X0 = random_point(metric, cfg.r0, np.random.default_rng(seed))
    record = ConvergenceRecord()
    X = X0
    res0 = obj.residual(X)
    scale = res0 if cfg.relative else 1.0
    record.meta.update(plateaus=[], rank_increases=[], residual_scale=scale)
    inner_cfg = cfg.inner
    solve = rcg_solve if cfg.solver == "rcg" else rtr_solve
    if cfg.solver == "rtr" and isinstance(inner_cfg, RtrConfig):
        inner_cfg = replace(inner_cfg, warmup_tol=None)
    elif cfg.solver == "rtr":
        inner_cfg = RtrConfig(warmup_tol=None)
    elif not isinstance(inner_cfg, RcgConfig):
        inner_cfg = RcgConfig()
    # tolerance handled through `stop`
    inner_cfg = replace(inner_cfg, tol=1e-300, relative=False)
    abs_tol = cfg.tol * scale

    def hook(Y):
        return _reduce_rank(Y, cfg.eps)

    def stop(Y, gn, o):
        res = o.residual(Y)
        return gn <= cfg.inner_rel * res or gn <= 0.1 * abs_tol or res <= abs_tol

    res = res0
    stalls = 0
    for _ in range(cfg.max_outer):
        if res <= abs_tol:
            if len(record):
                # the warm start alone met the tolerance
                record.meta["plateaus"].append((X.rank, res / scale))
            break
        try:
            X, record = solve(P, X, inner_cfg, obj_cfg, record=record, point_hook=hook,
                              stop=stop, objective=obj)
        except LineSearchStalled as exc:
            # a stalled phase is treated as converged at this rank
            X, record = exc.point, exc.record
        res = obj.residual(X)
        record.meta["plateaus"].append((X.rank, res / scale))
        if res <= abs_tol:
            break
        r_new = X.rank + cfg.r_up
        if r_new > min(P.m, P.n):
            raise RankExhausted(f"rank {r_new} exceeds min(m, n)", point=X, record=record)
        Y, alpha = normal_correction(P, X, cfg.r_up, obj)
        if alpha == 0.0:
            stalls += 1
            if stalls > 2:
                raise SolverError("no normal correction available", point=X, record=record)
            continue
        Z = X.factored() + Y * alpha
        X = weighted_truncated_svd(Z, metric, rank=X.rank + cfg.r_up)
        record.meta["rank_increases"].append((record.rows[-1][0], X.rank))
        log.info("rank increased to %d (residual %.3e)", X.rank, res / scale)
        res = obj.residual(X)
    record.meta["converged"] = res <= abs_tol
    record.meta["final_residual"] = res / scale
    return X, record
