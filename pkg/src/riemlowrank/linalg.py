"""Sparse/dense kernels shared by every other module.

Conventions
-----------
* Sparse symmetric matrices are ``scipy.sparse`` CSR matrices.
* Diagonal matrices are stored as 1-D arrays of their diagonal.
* A matrix ``Z`` of the ambient space is kept factored as ``left @ core @ right.T``
  (:class:`FactoredAmbient`) and never expanded unless explicitly asked.
* The preconditioned inner product is ``<A, C>_P = trace(D A^T K C)`` with ``K``
  SPD and ``D`` a positive diagonal; :class:`Metric` bundles both.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import factorial

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import DimensionMismatch, NotPositiveDefinite

__all__ = [
    "as_sparse_sym",
    "SpdFactorization",
    "spd_factorize",
    "spd_solve",
    "kt_product",
    "kt_power",
    "sym_kt_power",
    "FactoredAmbient",
    "Metric",
    "FixedRankPoint",
    "weighted_truncated_svd",
    "weighted_singular_values",
    "NUMERICAL_RANK_RTOL",
]

# singular values below this fraction of the largest are treated as zero
NUMERICAL_RANK_RTOL = 1e-14


def as_sparse_sym(A, check=True):
    """Return ``A`` as a CSR matrix, verifying exact symmetry."""
    A = sp.csr_matrix(A, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise DimensionMismatch(f"expected a nonempty square matrix, got {A.shape}")
    if check and (A - A.T).count_nonzero() != 0:
        raise ValueError("matrix is not exactly symmetric")
    A.sort_indices()
    return A


# SPD factorization ==========================================================
class SpdFactorization:
    """Banded Cholesky factorization ``A[perm][:, perm] = L L^T``.

    The permutation is a reverse Cuthill-McKee ordering, which keeps the
    factor inside a narrow band for finite element matrices on structured
    grids. ``R = L^T P`` satisfies ``A = R^T R`` and is what the weighted SVD
    uses to map the ``K``-inner product to the Euclidean one.
    """

    def __init__(self, band, perm, bandwidth):
        self._band = band
        self.perm = perm
        self.iperm = np.empty_like(perm)
        self.iperm[perm] = np.arange(perm.size)
        self.bandwidth = bandwidth
        self.shape = (perm.size, perm.size)
        self._L = None

    @property
    def factor(self):
        """Lower-triangular factor ``L`` as a CSR matrix (permuted ordering)."""
        if self._L is None:
            m, kd = self.shape[0], self.bandwidth
            rows, cols, vals = [], [], []
            for k in range(kd + 1):
                j = np.arange(m - k)
                rows.append(j + k)
                cols.append(j)
                vals.append(self._band[k, : m - k])
            L = sp.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=self.shape,
            ).tocsr()
            L.eliminate_zeros()
            self._L = L
        return self._L

    def _check_rows(self, C):
        if C.shape[0] != self.shape[0]:
            raise DimensionMismatch(
                f"right-hand side has {C.shape[0]} rows, factorization has {self.shape[0]}"
            )

    def solve(self, C):
        C = np.asarray(C, dtype=float)
        self._check_rows(C)
        vec = C.ndim == 1
        B = C[self.perm].reshape(self.shape[0], -1)
        if B.shape[1] == 0:
            return C.copy()
        X, info = lapack.dpbtrs(self._band, B, lower=1)
        if info != 0:  # pragma: no cover - only on malformed input
            raise RuntimeError(f"dpbtrs failed with info={info}")
        out = X[self.iperm]
        return out.ravel() if vec else out

    def apply_R(self, Y):
        """Return ``R Y = L^T (P Y)``."""
        Y = np.asarray(Y, dtype=float)
        self._check_rows(Y)
        return self.factor.T @ Y[self.perm]

    def solve_R(self, Y):
        """Return ``R^{-1} Y``."""
        Y = np.asarray(Y, dtype=float)
        self._check_rows(Y)
        vec = Y.ndim == 1
        B = Y.reshape(self.shape[0], -1)
        if B.shape[1] == 0:
            return Y.copy()
        Z, info = lapack.dtbtrs(self._band, B, uplo="L", trans="T")
        if info != 0:  # pragma: no cover
            raise RuntimeError(f"dtbtrs failed with info={info}")
        out = np.empty_like(Z)
        out[self.perm] = Z
        return out.ravel() if vec else out


def spd_factorize(A):
    """Factorize a sparse symmetric positive definite matrix.

    Raises
    ------
    NotPositiveDefinite
        If a non-positive pivot is met; ``err.index`` is the 1-based index of
        that pivot in the original numbering.
    """
    A = as_sparse_sym(A)
    m = A.shape[0]
    perm = np.asarray(reverse_cuthill_mckee(A, symmetric_mode=True), dtype=np.intp)
    Ap = A[perm][:, perm].tocoo()
    low = Ap.row >= Ap.col
    r, c, v = Ap.row[low], Ap.col[low], Ap.data[low]
    kd = int((r - c).max()) if r.size else 0
    band = np.zeros((kd + 1, m))
    band[r - c, c] = v
    cfac, info = lapack.dpbtrf(band, lower=1)
    if info > 0:
        raise NotPositiveDefinite(perm[info - 1] + 1)
    if info < 0:  # pragma: no cover
        raise RuntimeError(f"dpbtrf failed with info={info}")
    return SpdFactorization(cfac, perm, kd)


def spd_solve(F, C):
    """Solve ``A Y = C`` column by column with a precomputed factorization."""
    return F.solve(C)


# Khatri-Rao products ========================================================
def kt_product(A, C):
    """Transposed Khatri-Rao product: row ``i`` is ``kron(A[i], C[i])``."""
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    if A.shape[0] != C.shape[0]:
        raise DimensionMismatch(f"row counts differ: {A.shape[0]} vs {C.shape[0]}")
    return (A[:, :, None] * C[:, None, :]).reshape(A.shape[0], -1)


def kt_power(A, k):
    """``A ⋉ A ⋉ ... ⋉ A`` (``k`` factors), width ``r**k``."""
    out = A
    for _ in range(k - 1):
        out = kt_product(out, A)
    return out


def _multisets(r, k):
    idx = np.array(list(combinations_with_replacement(range(r), k)), dtype=np.intp)
    if idx.size == 0:
        return idx.reshape(0, k), np.zeros(0)
    mult = np.empty(idx.shape[0])
    for t, row in enumerate(idx):
        _, counts = np.unique(row, return_counts=True)
        mult[t] = factorial(k) / np.prod([factorial(c) for c in counts])
    return idx, mult


def sym_kt_power(A, k):
    """Columns of ``kt_power(A, k)`` with duplicates merged.

    Returns ``(P, mult, idx)`` where ``P[:, t] = prod_j A[:, idx[t, j]]`` over
    sorted multi-indices and ``mult[t]`` counts how often that column appears
    in the full power.  For any two row-factorizations ``X = A C^T`` the identity
    ``kt_power(A, k) @ kt_power(C, k).T == P_A @ diag(mult) @ P_C.T`` holds,
    which shrinks the width from ``r**k`` to ``binom(r + k - 1, k)``.
    """
    A = np.asarray(A, dtype=float)
    idx, mult = _multisets(A.shape[1], k)
    P = np.ones((A.shape[0], idx.shape[0]))
    for j in range(k):
        P *= A[:, idx[:, j]]
    return P, mult, idx


# Factored ambient matrices ==================================================
class FactoredAmbient:
    """An ``m x n`` matrix stored as ``left @ core @ right.T``.

    ``core`` is ``None`` (identity), a 1-D array (diagonal) or a square array.
    """

    __slots__ = ("left", "right", "core")

    def __init__(self, left, right, core=None):
        left = np.asarray(left, dtype=float)
        right = np.asarray(right, dtype=float)
        if left.ndim != 2 or right.ndim != 2:
            raise DimensionMismatch("factors must be 2-D")
        if core is None:
            if left.shape[1] != right.shape[1]:
                raise DimensionMismatch(f"inner widths differ: {left.shape[1]} vs {right.shape[1]}")
        else:
            core = np.asarray(core, dtype=float)
            if core.ndim == 1:
                if not (left.shape[1] == right.shape[1] == core.size):
                    raise DimensionMismatch("diagonal core does not match factor widths")
            elif core.shape != (left.shape[1], right.shape[1]):
                raise DimensionMismatch(
                    f"core {core.shape} does not match factors {left.shape}, {right.shape}"
                )
        self.left = left
        self.right = right
        self.core = core

    @classmethod
    def zeros(cls, m, n):
        return cls(np.zeros((m, 0)), np.zeros((n, 0)))

    @property
    def shape(self):
        return (self.left.shape[0], self.right.shape[0])

    @property
    def width(self):
        return self.left.shape[1]

    def _core_dense(self):
        if self.core is None:
            return np.eye(self.left.shape[1])
        if self.core.ndim == 1:
            return np.diag(self.core)
        return self.core

    def _core_mul(self, M):
        if self.core is None:
            return M
        if self.core.ndim == 1:
            return self.core[:, None] * M
        return self.core @ M

    def _core_tmul(self, M):
        if self.core is None:
            return M
        if self.core.ndim == 1:
            return self.core[:, None] * M
        return self.core.T @ M

    def right_mul_core(self, M):
        """``M @ core``."""
        if self.core is None:
            return M
        if self.core.ndim == 1:
            return M * self.core[None, :]
        return M @ self.core

    def left_core(self):
        """``left @ core`` (absorbs the core into the left factor)."""
        if self.core is None:
            return self.left
        if self.core.ndim == 1:
            return self.left * self.core
        return self.left @ self.core

    def absorbed(self):
        return FactoredAmbient(self.left_core(), self.right)

    def dense(self):
        return self.left_core() @ self.right.T

    def dot(self, M):
        """``Z @ M``."""
        return self.left @ self._core_mul(self.right.T @ M)

    def tdot(self, M):
        """``Z.T @ M``."""
        return self.right @ self._core_tmul(self.left.T @ M)

    @property
    def T(self):
        core = self.core
        if core is not None and core.ndim == 2:
            core = core.T
        return FactoredAmbient(self.right, self.left, core)

    def scaled(self, alpha):
        alpha = float(alpha)
        if self.core is None:
            return FactoredAmbient(alpha * self.left, self.right)
        return FactoredAmbient(self.left, self.right, alpha * self.core)

    def __mul__(self, alpha):
        return self.scaled(alpha)

    __rmul__ = __mul__

    def __neg__(self):
        return self.scaled(-1.0)

    def __add__(self, other):
        return FactoredAmbient.concat([self, other])

    def __sub__(self, other):
        return FactoredAmbient.concat([self, -other])

    @staticmethod
    def concat(terms):
        """Sum of factored matrices, stacking factors with a block-diagonal core."""
        terms = list(terms)
        shape = terms[0].shape
        for t in terms[1:]:
            if t.shape != shape:
                raise DimensionMismatch(f"cannot add {t.shape} to {shape}")
        left = np.hstack([t.left for t in terms])
        right = np.hstack([t.right for t in terms])
        if all(t.core is None for t in terms):
            return FactoredAmbient(left, right)
        if all(t.core is None or t.core.ndim == 1 for t in terms):
            core = np.concatenate(
                [np.ones(t.width) if t.core is None else t.core for t in terms]
            )
            return FactoredAmbient(left, right, core)
        blocks = [t._core_dense() for t in terms]
        core = np.zeros((left.shape[1], right.shape[1]))
        i = j = 0
        for b in blocks:
            core[i : i + b.shape[0], j : j + b.shape[1]] = b
            i += b.shape[0]
            j += b.shape[1]
        return FactoredAmbient(left, right, core)


# Metric =====================================================================
class Metric:
    """Inner product ``<A, C> = trace(D A^T K C)`` on ``m x n`` matrices.

    Parameters
    ----------
    K : sparse SPD matrix (m x m)
    d : (n,) positive array, diagonal of ``D``
    factorization : SpdFactorization, optional
        Reused when given, computed otherwise.
    name : str
        ``"preconditioned"`` or ``"frobenius"``; informational only.
    """

    def __init__(self, K, d, factorization=None, name="preconditioned"):
        self.K = as_sparse_sym(K, check=factorization is None)
        self.d = np.asarray(d, dtype=float).copy()
        if self.d.ndim != 1 or np.any(self.d <= 0):
            raise ValueError("right weights must be a positive 1-D array")
        self.kfac = factorization if factorization is not None else spd_factorize(self.K)
        if self.kfac.shape[0] != self.K.shape[0]:
            raise DimensionMismatch("factorization does not match K")
        self.sqrt_d = np.sqrt(self.d)
        self.name = name

    @classmethod
    def frobenius(cls, m, n):
        return cls(sp.identity(m, format="csr"), np.ones(n), name="frobenius")

    @property
    def m(self):
        return self.K.shape[0]

    @property
    def n(self):
        return self.d.size

    def inner(self, A, C):
        """``<A, C>_P`` for dense arrays or :class:`FactoredAmbient` operands."""
        if isinstance(A, FactoredAmbient) and isinstance(C, FactoredAmbient):
            # trace(D A^T K C) = trace((A_l^T K C_l) C_c (C_r^T D A_r) A_c^T)
            G = C.right_mul_core(A.left.T @ (self.K @ C.left))
            H = A.T.right_mul_core(C.right.T @ (self.d[:, None] * A.right))
            return float(np.sum(G * H.T))
        if isinstance(A, FactoredAmbient):
            A = A.dense()
        if isinstance(C, FactoredAmbient):
            C = C.dense()
        return float(np.sum((self.K @ C) * A * self.d[None, :]))

    def norm(self, A):
        """Metric norm.

        Factored operands go through thin QR factors of ``R A_l`` and
        ``D^{1/2} A_r``; the Gram form in :meth:`inner` would lose half the
        digits when the factored terms cancel (e.g. a gradient near a solution).
        """
        if isinstance(A, FactoredAmbient):
            if A.width == 0:
                return 0.0
            R1 = np.linalg.qr(self.kfac.apply_R(A.left), mode="r")
            R2 = np.linalg.qr(self.sqrt_d[:, None] * A.right, mode="r")
            return float(np.linalg.norm(A.right_mul_core(R1) @ R2.T))
        return float(np.sqrt(max(self.inner(A, A), 0.0)))

    def norm_dense(self, A, chunk=512):
        """P-norm of a dense matrix, computed in column chunks."""
        total = 0.0
        for j0 in range(0, A.shape[1], chunk):
            blk = A[:, j0 : j0 + chunk]
            total += float(np.sum((self.K @ blk) * blk * self.d[None, j0 : j0 + chunk]))
        return float(np.sqrt(max(total, 0.0)))


# Points of the fixed-rank manifold ==========================================
@dataclass(eq=False)
class FixedRankPoint:
    """Weighted SVD triple ``X = U diag(s) V^T`` with ``U^T K U = V^T D V = I``.

    ``info`` carries metadata such as ``rank_deficient`` flags set by the
    weighted truncation or by the retraction.
    """

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    metric: Metric
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        r = self.s.size
        if self.U.shape != (self.metric.m, r) or self.V.shape != (self.metric.n, r):
            raise DimensionMismatch(
                f"factor shapes {self.U.shape}, {self.V.shape} inconsistent with rank {r}"
            )
        self._KU = None
        self._DV = None

    @property
    def rank(self):
        return self.s.size

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    @property
    def KU(self):
        if self._KU is None:
            self._KU = np.asarray(self.metric.K @ self.U)
        return self._KU

    @property
    def DV(self):
        if self._DV is None:
            self._DV = self.metric.d[:, None] * self.V
        return self._DV

    def factored(self):
        return FactoredAmbient(self.U, self.V, self.s)

    def dense(self):
        return (self.U * self.s) @ self.V.T

    def truncate(self, k):
        return FixedRankPoint(self.U[:, :k], self.s[:k], self.V[:, :k], self.metric)

    def orthogonality_residuals(self):
        """``(||U^T K U - I||, ||V^T D V - I||)`` in the max norm."""
        I = np.eye(self.rank)
        return (
            float(np.abs(self.U.T @ self.KU - I).max(initial=0.0)),
            float(np.abs(self.V.T @ self.DV - I).max(initial=0.0)),
        )


def weighted_truncated_svd(Z, metric, rank=None, tol=None):
    """Best rank-``rank`` approximation of ``Z`` in the metric norm.

    ``Z`` is a :class:`FactoredAmbient` (or a dense array).  With ``K = R^T R``
    the problem reduces to a standard SVD of ``R Z D^{1/2}``; in factored form
    this is two thin QR factorizations and one small dense SVD.

    Parameters
    ----------
    rank : int, optional
        Target rank.  If it exceeds the numerical rank of ``Z`` the achievable
        rank is returned and ``info["rank_deficient"]`` is set.
    tol : float, optional
        Keep singular values with ``sigma_i > tol * sigma_1``.

    Returns
    -------
    FixedRankPoint
        ``info["singular_values"]`` holds every weighted singular value found.
    """
    if rank is None and tol is None:
        raise ValueError("give a target rank or a tolerance")
    if rank is not None and rank < 0:
        raise ValueError("rank must be nonnegative")
    if tol is not None and tol <= 0:
        raise ValueError("tol must be positive")
    kfac, sd = metric.kfac, metric.sqrt_d

    if isinstance(Z, FactoredAmbient):
        if Z.shape != (metric.m, metric.n):
            raise DimensionMismatch(f"matrix {Z.shape} vs metric {(metric.m, metric.n)}")
        if Z.width == 0:
            u = np.zeros((metric.m, 0))
            v = np.zeros((metric.n, 0))
            s = np.zeros(0)
        else:
            Q1, R1 = np.linalg.qr(kfac.apply_R(Z.left))
            Q2, R2 = np.linalg.qr(sd[:, None] * Z.right)
            uc, s, vct = np.linalg.svd(Z.right_mul_core(R1) @ R2.T)
            u = Q1 @ uc
            v = Q2 @ vct.T
    else:
        Z = np.asarray(Z, dtype=float)
        if Z.shape != (metric.m, metric.n):
            raise DimensionMismatch(f"matrix {Z.shape} vs metric {(metric.m, metric.n)}")
        u, s, vt = np.linalg.svd(kfac.apply_R(Z) * sd[None, :], full_matrices=False)
        v = vt.T

    if s.size == 0 or s[0] == 0.0:
        numrank = 0
    else:
        numrank = int(np.count_nonzero(s > NUMERICAL_RANK_RTOL * s[0]))
    keep = numrank
    info = {"singular_values": s.copy(), "numerical_rank": numrank}
    if tol is not None:
        keep = min(keep, int(np.count_nonzero(s > tol * s[0])) if numrank else 0)
    if rank is not None:
        info["requested_rank"] = int(rank)
        if rank > keep and tol is None:
            info["rank_deficient"] = True
        keep = min(keep, rank)
    U = kfac.solve_R(u[:, :keep])
    V = v[:, :keep] / sd[:, None]
    return FixedRankPoint(U, s[:keep].copy(), V, metric, info)


def weighted_singular_values(X, metric):
    """All weighted singular values of a dense ``m x n`` matrix."""
    from scipy.linalg import svdvals

    X = np.asarray(X, dtype=float)
    return svdvals(metric.kfac.apply_R(X) * metric.sqrt_d[None, :])
