"""Geometry of the fixed-rank manifold under the metric ``<A, C> = tr(D A^T K C)``.

A point is a :class:`~riemlowrank.linalg.FixedRankPoint` ``U diag(s) V^T`` with
``U^T K U = V^T D V = I``.  A tangent vector at that point is stored as
``(M, Up, Vp)`` with ``U^T K Up = 0`` and ``V^T D Vp = 0`` and represents the
ambient matrix ``U M V^T + Up V^T + U Vp^T``.
"""

from __future__ import annotations

import numpy as np

from .errors import AnchorMismatch, DimensionMismatch, IllConditionedPoint
from .linalg import FactoredAmbient, FixedRankPoint, weighted_truncated_svd

__all__ = [
    "TangentVector",
    "project_tangent",
    "inner",
    "norm",
    "retract",
    "transport",
    "project_normal",
    "riemannian_hessian_apply",
    "gauge_residuals",
    "random_tangent",
    "PAD_FACTOR",
]

# relative size of the singular values used to pad a rank-deficient retraction
PAD_FACTOR = 1e-8
_ILL_CONDITIONED_RTOL = 1e-14


class TangentVector:
    """Tangent triple anchored (by identity) at ``point``."""

    __slots__ = ("point", "M", "Up", "Vp")

    def __init__(self, point: FixedRankPoint, M, Up, Vp):
        r = point.rank
        M, Up, Vp = (np.asarray(a, dtype=float) for a in (M, Up, Vp))
        if M.shape != (r, r) or Up.shape != point.U.shape or Vp.shape != point.V.shape:
            raise DimensionMismatch("tangent triple does not match its anchor point")
        self.point, self.M, self.Up, self.Vp = point, M, Up, Vp

    @classmethod
    def zeros(cls, X: FixedRankPoint):
        return cls(X, np.zeros((X.rank, X.rank)), np.zeros_like(X.U), np.zeros_like(X.V))

    def _same(self, other):
        if not isinstance(other, TangentVector):
            return NotImplemented
        if other.point is not self.point:
            raise AnchorMismatch("tangent vectors live at different points")
        return other

    def __add__(self, other):
        other = self._same(other)
        if other is NotImplemented:
            return other
        return TangentVector(self.point, self.M + other.M, self.Up + other.Up, self.Vp + other.Vp)

    def __sub__(self, other):
        other = self._same(other)
        if other is NotImplemented:
            return other
        return TangentVector(self.point, self.M - other.M, self.Up - other.Up, self.Vp - other.Vp)

    def __mul__(self, alpha):
        alpha = float(alpha)
        return TangentVector(self.point, alpha * self.M, alpha * self.Up, alpha * self.Vp)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def axpy(self, alpha, other):
        """``self + alpha * other``."""
        other = self._same(other)
        return TangentVector(
            self.point,
            self.M + alpha * other.M,
            self.Up + alpha * other.Up,
            self.Vp + alpha * other.Vp,
        )

    def embed(self) -> FactoredAmbient:
        """Ambient matrix ``(U M + Up) V^T + U Vp^T`` as a width-``2r`` factorization."""
        X = self.point
        return FactoredAmbient(np.hstack([X.U @ self.M + self.Up, X.U]), np.hstack([X.V, self.Vp]))

    def dense(self):
        return self.embed().dense()


def _dot(Z, A):
    return Z.dot(A) if isinstance(Z, FactoredAmbient) else np.asarray(Z) @ A


def _tdot(Z, A):
    return Z.tdot(A) if isinstance(Z, FactoredAmbient) else np.asarray(Z).T @ A


def project_tangent(X: FixedRankPoint, Z) -> TangentVector:
    """Metric-orthogonal projection of an ambient matrix onto the tangent space at ``X``."""
    if tuple(Z.shape) != X.shape:
        raise DimensionMismatch(f"ambient matrix {Z.shape} vs point {X.shape}")
    ZDV = _dot(Z, X.DV)
    ZtKU = _tdot(Z, X.KU)
    M = X.KU.T @ ZDV
    return TangentVector(X, M, ZDV - X.U @ M, ZtKU - X.V @ M.T)


def inner(X: FixedRankPoint, a: TangentVector, b: TangentVector) -> float:
    if a.point is not X or b.point is not X:
        raise AnchorMismatch("tangent vectors are not anchored at this point")
    d = X.metric.d
    return float(
        np.sum(a.M * b.M)
        + np.sum(a.Up * (X.metric.K @ b.Up))
        + np.sum(a.Vp * (d[:, None] * b.Vp))
    )


def norm(X: FixedRankPoint, a: TangentVector) -> float:
    return float(np.sqrt(max(inner(X, a, a), 0.0)))


def _complement(B, WB, k, weight_apply, rng):
    """``k`` columns orthonormal w.r.t. ``weight_apply`` and orthogonal to ``B``."""
    out = []
    for _ in range(4 * k + 8):
        if len(out) == k:
            break
        y = rng.standard_normal(B.shape[0])
        n0 = np.sqrt(float(y @ weight_apply(y)))
        for _ in range(2):
            y = y - B @ (WB.T @ y)
            for q, wq in out:
                y = y - q * (wq @ y)
        wy = weight_apply(y)
        nrm = np.sqrt(max(float(y @ wy), 0.0))
        if nrm > 1e-6 * n0:
            out.append((y / nrm, wy / nrm))
    if len(out) < k:  # pragma: no cover - would need rank >= dimension
        raise IllConditionedPoint("cannot complete the basis for padding")
    return np.column_stack([q for q, _ in out])


def retract(X: FixedRankPoint, xi: TangentVector) -> FixedRankPoint:
    """Metric-projection retraction: best rank-``r`` approximation of ``X + xi``.

    When ``X + xi`` has numerical rank below ``r`` the missing directions are
    filled by fresh weighted-orthonormal complements with singular value
    ``PAD_FACTOR * s_min``; ``info["padded"]`` records how many.
    """
    if xi.point is not X:
        raise AnchorMismatch("tangent vector is not anchored at this point")
    r = X.rank
    core = np.zeros((2 * r, 2 * r))
    core[:r, :r] = np.diag(X.s) + xi.M
    core[:r, r:] = np.eye(r)
    core[r:, :r] = np.eye(r)
    Z = FactoredAmbient(np.hstack([X.U, xi.Up]), np.hstack([X.V, xi.Vp]), core)
    Y = weighted_truncated_svd(Z, X.metric, rank=r)
    k = r - Y.rank
    if k == 0:
        return FixedRankPoint(Y.U, Y.s, Y.V, X.metric)
    metric = X.metric
    rng = np.random.default_rng(12345)
    KU = np.asarray(metric.K @ Y.U)
    DV = metric.d[:, None] * Y.V
    Uc = _complement(Y.U, KU, k, lambda y: metric.K @ y, rng)
    Vc = _complement(Y.V, DV, k, lambda y: metric.d * y, rng)
    smin = Y.s[-1] if Y.rank else X.s[-1]
    s = np.concatenate([Y.s, smin * PAD_FACTOR * np.ones(k)])
    s = s * (1.0 - 1e-3 * np.concatenate([np.zeros(Y.rank), np.arange(k)]) / max(k, 1))
    return FixedRankPoint(
        np.hstack([Y.U, Uc]), s, np.hstack([Y.V, Vc]), metric, {"padded": k, "rank_deficient": True}
    )


def transport(X_new: FixedRankPoint, xi: TangentVector) -> TangentVector:
    """Vector transport by projection onto the tangent space at ``X_new``."""
    if xi.point is X_new:
        return xi
    return project_tangent(X_new, xi.embed())


def project_normal(X: FixedRankPoint, Z) -> FactoredAmbient:
    """``Z - P_X(Z)`` kept in factored form.

    Written as ``(I - U U^T K) Z (I - D V V^T)`` so the factors themselves are
    small when ``Z`` is nearly tangent (the difference form would cancel).
    """
    if not isinstance(Z, FactoredAmbient):
        Z = FactoredAmbient(np.asarray(Z, dtype=float), np.eye(X.shape[1]))
    left = Z.left - X.U @ (X.KU.T @ Z.left)
    right = Z.right - X.V @ (X.DV.T @ Z.right)
    return FactoredAmbient(left, right, Z.core)


def riemannian_hessian_apply(
    X: FixedRankPoint, H: TangentVector, Z, Zdot
) -> TangentVector:
    """Riemannian Hessian from the Euclidean gradient ``Z`` and its derivative ``Zdot``.

    ``Z`` and ``Zdot`` are the metric (preconditioned) Euclidean gradient and
    its directional derivative along ``embed(H)``.  The curvature terms divide
    by the singular values, so tiny ones are rejected.
    """
    if H.point is not X:
        raise AnchorMismatch("direction is not anchored at this point")
    s = X.s
    if s.size and s[-1] < _ILL_CONDITIONED_RTOL * s[0]:
        raise IllConditionedPoint(
            f"smallest singular value {s[-1]:.3e} is below {_ILL_CONDITIONED_RTOL} * {s[0]:.3e}"
        )
    KU, DV = X.KU, X.DV
    ZdDV = _dot(Zdot, DV)
    M = KU.T @ ZdDV
    Yu = ZdDV + _dot(Z, X.metric.d[:, None] * H.Vp) / s
    Up = Yu - X.U @ (KU.T @ Yu)
    Yv = _tdot(Zdot, KU) + _tdot(Z, np.asarray(X.metric.K @ H.Up)) / s
    Vp = Yv - X.V @ (DV.T @ Yv)
    return TangentVector(X, M, Up, Vp)


def gauge_residuals(xi: TangentVector):
    """``(max|U^T K Up|, max|V^T D Vp|)``."""
    X = xi.point
    return (
        float(np.abs(X.KU.T @ xi.Up).max(initial=0.0)),
        float(np.abs(X.DV.T @ xi.Vp).max(initial=0.0)),
    )


def random_tangent(X: FixedRankPoint, rng, scale=1.0) -> TangentVector:
    """Random tangent vector (projection of a random rank-``r`` ambient matrix)."""
    m, n = X.shape
    r = X.rank
    Z = FactoredAmbient(rng.standard_normal((m, r)), rng.standard_normal((n, r)))
    xi = project_tangent(X, Z)
    return xi * (scale / max(norm(X, xi), 1e-300))
