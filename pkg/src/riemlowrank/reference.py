"""Ground truth from per-sample solves of the full parametrized systems.

All column solvers work on blocks of columns at once: the operator of sample
``j`` is ``A_0 + sum_i c_ij A_i``, so one block product costs ``p + 1`` sparse
products with a column scaling, and the preconditioner ``K`` is applied with
its banded factorization.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import svdvals

from .errors import DimensionMismatch
from .linalg import FixedRankPoint, Metric
from .problem import ProblemData

__all__ = [
    "SnapshotMatrix",
    "solve_snapshot_linear",
    "solve_snapshot_newton",
    "solve_snapshot",
    "relative_error",
    "best_rank_error",
    "singular_decay",
]

_CHUNK = 256


@dataclass(eq=False)
class SnapshotMatrix:
    """Dense ``m x n`` matrix of per-sample solutions with solver diagnostics."""

    X: np.ndarray
    iterations: np.ndarray
    residuals: np.ndarray
    converged: np.ndarray
    method: str = "linear"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._spectra = {}

    @property
    def shape(self):
        return self.X.shape

    def spectrum(self, metric: Metric) -> np.ndarray:
        """Weighted singular values, cached per metric."""
        key = id(metric)
        if key not in self._spectra:
            self._spectra[key] = (metric, svdvals(metric.kfac.apply_R(self.X) * metric.sqrt_d[None, :]))
        return self._spectra[key][1]


class _BlockOperator:
    """``A(xi_j)`` applied to the columns of a block, for a fixed set of samples."""

    def __init__(self, P: ProblemData, cols):
        self.mats = P.operator.mats
        xi0 = P.xi.xi0[cols]
        self.coef = [d[cols] / xi0 for d in P.xi.diags[1:]]

    def __call__(self, Y, active=slice(None)):
        out = np.asarray(self.mats[0] @ Y)
        for A, c in zip(self.mats[1:], self.coef):
            out += np.asarray(A @ Y) * c[active][None, :]
        return out


def _col_dot(A, C):
    return np.einsum("ij,ij->j", A, C)


def _linear_block(P, cols, rtol, max_iter):
    """K-preconditioned steepest descent with exact steps for one block of columns."""
    A = _BlockOperator(P, cols)
    b = P.rhs_columns(cols)
    bnorm = np.linalg.norm(b, axis=0)
    nc = b.shape[1]
    x = np.zeros_like(b)
    its = np.zeros(nc, dtype=int)
    done = bnorm == 0
    r = b.copy()
    for k in range(1, max_iter + 1):
        act = np.nonzero(~done)[0]
        if act.size == 0:
            break
        ra = r[:, act]
        z = P.kfac.solve(ra)
        w = A(z, act)
        alpha = _col_dot(ra, z) / _col_dot(z, w)
        x[:, act] += z * alpha
        its[act] = k
        if k % 20 == 0:
            r[:, act] = b[:, act] - A(x[:, act], act)
        else:
            r[:, act] = ra - w * alpha
        rn = np.linalg.norm(r[:, act], axis=0)
        near = rn <= rtol * bnorm[act]
        if np.any(near):
            # confirm with the true residual before freezing a column
            idx = act[near]
            rt = b[:, idx] - A(x[:, idx], idx)
            r[:, idx] = rt
            ok = np.linalg.norm(rt, axis=0) <= rtol * bnorm[idx]
            done[idx[ok]] = True
    res = np.linalg.norm(b - A(x), axis=0) / np.where(bnorm > 0, bnorm, 1.0)
    return x, its, res, res <= rtol


def _pcg_block(apply, K, rhs, atol, max_iter):
    """Preconditioned CG on many right-hand sides with per-column tolerances."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    z = K.solve(r)
    d = z.copy()
    rz = _col_dot(r, z)
    act = np.linalg.norm(r, axis=0) > atol
    for _ in range(max_iter):
        idx = np.nonzero(act)[0]
        if idx.size == 0:
            break
        Ad = apply(d[:, idx], idx)
        alpha = rz[idx] / _col_dot(d[:, idx], Ad)
        x[:, idx] += d[:, idx] * alpha
        r[:, idx] -= Ad * alpha
        act[idx] = np.linalg.norm(r[:, idx], axis=0) > atol[idx]
        idx = np.nonzero(act)[0]
        if idx.size == 0:
            break
        z = K.solve(r[:, idx])
        rz_new = _col_dot(r[:, idx], z)
        d[:, idx] = z + d[:, idx] * (rz_new / rz[idx])
        rz[idx] = rz_new
    return x


def _newton_block(P, cols, rtol, max_newton, cg_max):
    A = _BlockOperator(P, cols)
    b = P.rhs_columns(cols)
    w = P.nonlinearity.w[:, None] if P.nonlinearity.active else np.zeros((P.m, 1))
    bnorm = np.linalg.norm(b, axis=0)
    nc = b.shape[1]
    x = np.zeros_like(b)
    its = np.zeros(nc, dtype=int)
    done = bnorm == 0
    res = np.zeros(nc)
    for k in range(max_newton + 1):
        F = A(x) + w * x**3 - b
        res = np.linalg.norm(F, axis=0) / np.where(bnorm > 0, bnorm, 1.0)
        done |= res <= rtol
        act = np.nonzero(~done)[0]
        if act.size == 0 or k == max_newton:
            break
        x2 = 3.0 * w * x[:, act] ** 2

        def jac(Y, idx, act=act, x2=x2):
            return A(Y, act[idx]) + x2[:, idx] * Y

        # each linear solve is taken to the final tolerance
        atol = 0.25 * rtol * bnorm[act]
        dx = _pcg_block(jac, P.kfac, -F[:, act], atol, cg_max)
        x[:, act] += dx
        its[act] = k + 1
    return x, its, res, res <= rtol


def _run_blocks(P, fn, threads, chunk, *args):
    blocks = [np.arange(j0, min(j0 + chunk, P.n)) for j0 in range(0, P.n, chunk)]
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: fn(P, c, *args), blocks))
    else:
        parts = [fn(P, c, *args) for c in blocks]
    X = np.hstack([p[0] for p in parts])
    its = np.concatenate([p[1] for p in parts])
    res = np.concatenate([p[2] for p in parts])
    ok = np.concatenate([p[3] for p in parts])
    return X, its, res, ok


def solve_snapshot_linear(
    P: ProblemData, rtol: float = 1e-12, max_iter: int = 100_000, threads: int = 1, chunk: int = _CHUNK
) -> SnapshotMatrix:
    """Columns ``x(xi_j)`` by K-preconditioned steepest descent with exact line search.

    Columns that hit ``max_iter`` are flagged in ``converged``.
    """
    if P.nonlinearity.active:
        raise ValueError("problem has a nonlinearity; use solve_snapshot_newton")
    X, its, res, ok = _run_blocks(P, _linear_block, threads, chunk, rtol, max_iter)
    return SnapshotMatrix(X, its, res, ok, "linear")


def solve_snapshot_newton(
    P: ProblemData,
    rtol: float = 1e-12,
    max_newton: int = 30,
    cg_max: int = 2000,
    threads: int = 1,
    chunk: int = _CHUNK,
) -> SnapshotMatrix:
    """Columns by Newton's method from zero with K-preconditioned CG inner solves.

    ``iterations[j]`` counts Newton updates of column ``j``.
    """
    X, its, res, ok = _run_blocks(P, _newton_block, threads, chunk, rtol, max_newton, cg_max)
    return SnapshotMatrix(X, its, res, ok, "newton")


def solve_snapshot(P: ProblemData, **kw) -> SnapshotMatrix:
    if P.nonlinearity.active:
        return solve_snapshot_newton(P, **kw)
    return solve_snapshot_linear(P, **kw)


def relative_error(Xsnap, Xr: FixedRankPoint, metric: Metric | None = None, chunk: int = 512) -> float:
    """``||X - X_r||_P / ||X||_P`` from one pass over column blocks.

    Falls back to the absolute error when the snapshot is zero.
    """
    X = Xsnap.X if isinstance(Xsnap, SnapshotMatrix) else np.asarray(Xsnap)
    metric = Xr.metric if metric is None else metric
    if X.shape != Xr.shape:
        raise DimensionMismatch(f"snapshot {X.shape} vs approximation {Xr.shape}")
    Us = Xr.U * Xr.s
    num = den = 0.0
    for j0 in range(0, X.shape[1], chunk):
        sl = slice(j0, j0 + chunk)
        Xb = X[:, sl]
        Db = Xb - Us @ Xr.V[sl].T
        d = metric.d[sl][None, :]
        num += float(np.sum(Db * (metric.K @ Db) * d))
        den += float(np.sum(Xb * (metric.K @ Xb) * d))
    num = np.sqrt(max(num, 0.0))
    return num / np.sqrt(den) if den > 0 else num


def best_rank_error(spectrum, r: int) -> float:
    """Relative metric-norm error of the best rank-``r`` truncation."""
    s = np.asarray(spectrum, dtype=float)
    if r < 1:
        raise ValueError("rank must be at least 1")
    total = float(np.sum(s**2))
    if total == 0:
        return 0.0
    return float(np.sqrt(np.sum(s[r:] ** 2) / total))


def singular_decay(spectrum, fit_range=(4, 40)):
    """Normalized spectrum and the algebraic decay exponent fitted over ``fit_range``.

    Returns ``(s / s[0], exponent)`` where ``s_l / s_1 ~ l**(-exponent)`` on
    the (1-based) index range; ``nan`` if fewer than two positive values fall in it.
    """
    s = np.asarray(spectrum, dtype=float)
    rel = s / s[0] if s.size and s[0] > 0 else s.copy()
    lo, hi = fit_range
    ell = np.arange(1, s.size + 1)
    sel = (ell >= lo) & (ell <= hi) & (rel > 0)
    if np.count_nonzero(sel) < 2:
        return rel, float("nan")
    slope = np.polyfit(np.log(ell[sel]), np.log(rel[sel]), 1)[0]
    return rel, float(-slope)
