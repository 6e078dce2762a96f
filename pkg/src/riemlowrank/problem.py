"""Discretized parametrized problem ``A(xi) x + g(x) = b(xi)`` in matrix form."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvariantViolation
from .linalg import FactoredAmbient, Metric, SpdFactorization, as_sparse_sym, spd_factorize

__all__ = [
    "SampleSet",
    "XiMatrices",
    "AffineOperator",
    "NonlinearitySpec",
    "ProblemData",
    "build_xi_matrices",
    "apply_affine_block",
]


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Parameter samples ``xi`` (n x p) with positive quadrature weights."""

    xi: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if xi.shape[0] != w.size:
            raise DimensionMismatch(f"{xi.shape[0]} samples but {w.size} weights")
        if np.any(w <= 0):
            raise InvariantViolation("sample weights must be strictly positive")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, xi):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        return cls(xi, np.full(xi.shape[0], 1.0 / xi.shape[0]))

    @property
    def n(self):
        return self.xi.shape[0]

    @property
    def p(self):
        return self.xi.shape[1]


@dataclass(frozen=True, eq=False)
class XiMatrices:
    """Diagonals of ``Xi_0 .. Xi_p``; ``diags[0]`` is the weight vector."""

    diags: tuple

    def __post_init__(self):
        diags = tuple(np.asarray(d, dtype=float).ravel() for d in self.diags)
        if not diags:
            raise DimensionMismatch("need at least Xi_0")
        n = diags[0].size
        if any(d.size != n for d in diags):
            raise DimensionMismatch("sample matrices have different sizes")
        if np.any(diags[0] <= 0):
            raise InvariantViolation("Xi_0 must have a positive diagonal")
        object.__setattr__(self, "diags", diags)

    @property
    def xi0(self):
        return self.diags[0]

    @property
    def n(self):
        return self.diags[0].size

    @property
    def p(self):
        return len(self.diags) - 1

    def __len__(self):
        return len(self.diags)

    def __getitem__(self, i):
        return self.diags[i]


def build_xi_matrices(samples: SampleSet) -> XiMatrices:
    """``Xi_0 = diag(m_j)`` and ``Xi_i = diag(m_j * xi_j[i])``."""
    w = samples.weights
    return XiMatrices((w.copy(),) + tuple(w * samples.xi[:, i] for i in range(samples.p)))


@dataclass(frozen=True, eq=False)
class AffineOperator:
    """Symmetric matrices ``A_0 .. A_p`` with ``A(xi) = A_0 + sum_i xi_i A_i``."""

    mats: tuple

    def __post_init__(self):
        mats = tuple(as_sparse_sym(A) for A in self.mats)
        m = mats[0].shape[0]
        if any(A.shape != (m, m) for A in mats):
            raise DimensionMismatch("affine pieces must share one dimension")
        object.__setattr__(self, "mats", mats)

    @property
    def m(self):
        return self.mats[0].shape[0]

    @property
    def p(self):
        return len(self.mats) - 1

    def __len__(self):
        return len(self.mats)

    def __getitem__(self, i):
        return self.mats[i]

    def at(self, coeffs):
        """``A_0 + sum_i coeffs[i-1] A_i`` as CSR."""
        out = self.mats[0].copy()
        for c, A in zip(coeffs, self.mats[1:]):
            out = out + float(c) * A
        return out.tocsr()


def apply_affine_block(op: AffineOperator, Phi) -> list:
    """Return ``[A_0 @ Phi, ..., A_p @ Phi]``."""
    Phi = np.asarray(Phi, dtype=float)
    if Phi.shape[0] != op.m:
        raise DimensionMismatch(f"block has {Phi.shape[0]} rows, operator has {op.m}")
    return [np.asarray(A @ Phi) for A in op.mats]


@dataclass(frozen=True, eq=False)
class NonlinearitySpec:
    """Either no nonlinearity or ``g(x) = W x**3`` with positive lumped weights ``w``."""

    kind: str = "none"
    w: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "lumped-quartic"):
            raise ValueError(f"unknown nonlinearity {self.kind!r}")
        if self.kind == "lumped-quartic":
            w = np.asarray(self.w, dtype=float).ravel()
            if np.any(w <= 0):
                raise InvariantViolation("lumped weights must be strictly positive")
            object.__setattr__(self, "w", w)

    @classmethod
    def quartic(cls, w):
        return cls("lumped-quartic", w)

    @property
    def active(self):
        return self.kind != "none"


@dataclass(eq=False)
class ProblemData:
    """Everything the objective needs, with consistent dimensions.

    ``K`` defaults to ``A_0``.  Metrics are built lazily and cached per mode.
    """

    operator: AffineOperator
    xi: XiMatrices
    B: FactoredAmbient
    K: sp.csr_matrix | None = None
    nonlinearity: NonlinearitySpec = field(default_factory=NonlinearitySpec)
    kfac: SpdFactorization | None = None
    samples: SampleSet | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = self.operator.m, self.xi.n
        if len(self.operator) != len(self.xi):
            raise DimensionMismatch(
                f"{len(self.operator)} operator pieces but {len(self.xi)} sample matrices"
            )
        if self.B.shape != (m, n):
            raise DimensionMismatch(f"right-hand side {self.B.shape}, expected {(m, n)}")
        self.K = self.operator[0] if self.K is None else as_sparse_sym(self.K)
        if self.K.shape != (m, m):
            raise DimensionMismatch("preconditioner dimension mismatch")
        if self.nonlinearity.active and self.nonlinearity.w.size != m:
            raise DimensionMismatch("lumped weights dimension mismatch")
        if self.kfac is None:
            self.kfac = spd_factorize(self.K)
        # lets the objective skip the solve K^{-1} A_0 = I
        self.k_is_a0 = (self.K - self.operator[0]).count_nonzero() == 0
        self._metrics = {}

    @property
    def m(self):
        return self.operator.m

    @property
    def n(self):
        return self.xi.n

    @property
    def p(self):
        return self.operator.p

    def metric(self, mode="preconditioned") -> Metric:
        """Preconditioned metric ``(K, Xi_0)`` or the plain Frobenius one."""
        if mode not in self._metrics:
            if mode == "preconditioned":
                self._metrics[mode] = Metric(self.K, self.xi.xi0, self.kfac)
            elif mode == "frobenius":
                self._metrics[mode] = Metric.frobenius(self.m, self.n)
            else:
                raise ValueError(f"unknown metric mode {mode!r}")
        return self._metrics[mode]

    def sample_coefficients(self, j):
        """Affine coefficients of sample ``j``, recovered as ``Xi_i[j] / Xi_0[j]``."""
        return np.array([d[j] / self.xi.xi0[j] for d in self.xi.diags[1:]])

    def sample_operator(self, j):
        return self.operator.at(self.sample_coefficients(j))

    def rhs_columns(self, cols: Sequence[int] | slice | None = None):
        """Dense columns of ``B``."""
        right = self.B.right if cols is None else self.B.right[cols]
        return FactoredAmbient(self.B.left, np.atleast_2d(right), self.B.core).dense()

    def linear_part(self) -> "ProblemData":
        """The same problem with the nonlinearity dropped; shares factorization and metrics."""
        Q = ProblemData(self.operator, self.xi, self.B, K=self.K, kfac=self.kfac,
                        samples=self.samples, meta=dict(self.meta, nonlinear=False))
        Q._metrics = self._metrics
        return Q
