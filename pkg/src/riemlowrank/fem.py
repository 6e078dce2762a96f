"""P1 finite elements on the unit square for the diffusion test problems.

The mesh has ``N x N`` interior nodes (``h = 1/(N+1)``), every cell split along
its south-west/north-east diagonal.  Interior nodes are numbered row-major with
``x2`` as the row: node ``(a, b)`` (``x1 = a h``, ``x2 = b h``, ``1 <= a, b <= N``)
has index ``(b - 1) N + (a - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .linalg import FactoredAmbient, Metric, kt_product, weighted_truncated_svd
from .problem import (
    AffineOperator,
    NonlinearitySpec,
    ProblemData,
    SampleSet,
    build_xi_matrices,
)

__all__ = [
    "StructuredGrid",
    "KlMode",
    "kl_mode",
    "kl_coefficient",
    "GaussianForcing",
    "ConstantForcing",
    "assemble_stiffness",
    "assemble_load_dense",
    "assemble_rhs",
    "mass_lump",
    "sample_parameters",
    "build_problem",
]


@dataclass(frozen=True)
class StructuredGrid:
    N: int

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError("need at least one interior node per side")

    @property
    def m(self):
        return self.N * self.N

    @property
    def h(self):
        return 1.0 / (self.N + 1)

    def nodes(self):
        """Interior node coordinates, shape (m, 2)."""
        t = self.h * np.arange(1, self.N + 1)
        x1, x2 = np.meshgrid(t, t, indexing="xy")
        return np.column_stack([x1.ravel(), x2.ravel()])

    @cached_property
    def _mesh(self):
        M = self.N + 2
        a, b = np.meshgrid(np.arange(self.N + 1), np.arange(self.N + 1), indexing="xy")
        a, b = a.ravel(), b.ravel()
        v00 = b * M + a
        v10 = v00 + 1
        v01 = v00 + M
        v11 = v01 + 1
        tris = np.vstack([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
        # full-grid integer coordinates, and the interior numbering (-1 on the boundary)
        ia, ib = tris % M, tris // M
        interior = (ia >= 1) & (ia <= self.N) & (ib >= 1) & (ib <= self.N)
        local = np.where(interior, (ib - 1) * self.N + (ia - 1), -1)
        return tris, ia, ib, local

    def triangles(self):
        """``(ia, ib, local)``: integer vertex coordinates and interior indices per triangle."""
        _, ia, ib, local = self._mesh
        return ia, ib, local

    @cached_property
    def _midpoints(self):
        # edge midpoints in half-step integer coordinates, deduplicated
        ia, ib, local = self.triangles()
        ja = ia[:, [0, 1, 2]] + ia[:, [1, 2, 0]]  # edge (v0,v1), (v1,v2), (v2,v0)
        jb = ib[:, [0, 1, 2]] + ib[:, [1, 2, 0]]
        key = ja * (2 * self.N + 3) + jb
        uniq, inv = np.unique(key.ravel(), return_inverse=True)
        qa, qb = uniq // (2 * self.N + 3), uniq % (2 * self.N + 3)
        inv = inv.reshape(key.shape)
        # vertex i touches edges i and i-1 (mod 3), each with basis value 1/2
        area = 0.5 * self.h**2
        rows, cols = [], []
        for i in range(3):
            for e in (i, (i - 1) % 3):
                rows.append(local[:, i])
                cols.append(inv[:, e])
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        keep = rows >= 0
        Q = sp.coo_matrix(
            (np.full(keep.sum(), area / 6.0), (rows[keep], cols[keep])),
            shape=(self.m, uniq.size),
        ).tocsr()
        return Q, qa, qb

    def load_quadrature(self):
        """Sparse ``Q`` (m x nq) and half-step integer coordinates of the nq points.

        ``(Q @ f(points))[i]`` is the edge-midpoint quadrature of ``int f phi_i``.
        """
        return self._midpoints


@dataclass(frozen=True)
class KlMode:
    index: int
    k: int
    l: int

    @property
    def amplitude(self):
        return 1.0 / (self.k**2 + self.l**2)

    def __call__(self, x1, x2):
        return self.amplitude * np.sin(np.pi * self.k * x1) * np.sin(np.pi * self.l * x2)


def kl_mode(j: int) -> KlMode:
    """``j``-th wavenumber pair, ordered by ``k + l`` and then by ``k``."""
    if j < 1:
        raise ValueError("modes are numbered from 1")
    s, left = 2, j
    while left > s - 1:
        left -= s - 1
        s += 1
    k = left
    return KlMode(j, k, s - k)


def kl_coefficient(xi):
    """Diffusion coefficient ``1 + sum_j xi_j psi_j`` as a callable of ``(x1, x2)``."""
    xi = np.asarray(xi, dtype=float).ravel()
    modes = [kl_mode(j + 1) for j in range(xi.size)]

    def coeff(x1, x2):
        out = np.ones(np.broadcast(x1, x2).shape)
        for c, psi in zip(xi, modes):
            out = out + c * psi(x1, x2)
        return out

    return coeff


def assemble_stiffness(grid: StructuredGrid, coeff: Callable | float = 1.0) -> sp.csr_matrix:
    """``int coeff grad(phi_j) . grad(phi_i)`` with one-point barycentric quadrature."""
    ia, ib, local = grid.triangles()
    h = grid.h
    # every triangle is a right isosceles triangle with legs h, so the local
    # gradient matrix follows from the reference geometry
    e1 = np.stack([ia[:, 1] - ia[:, 0], ib[:, 1] - ib[:, 0]], axis=-1) * h
    e2 = np.stack([ia[:, 2] - ia[:, 0], ib[:, 2] - ib[:, 0]], axis=-1) * h
    J = np.stack([e1, e2], axis=-1)  # columns are edge vectors
    Jinv = np.linalg.inv(J)
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    G = ref @ Jinv  # (T, 3, 2): row i is grad phi_i
    area = 0.5 * np.abs(np.linalg.det(J))
    if callable(coeff):
        cx = h * ia.mean(axis=1)
        cy = h * ib.mean(axis=1)
        c = np.asarray(coeff(cx, cy), dtype=float) * np.ones(ia.shape[0])
    else:
        c = np.full(ia.shape[0], float(coeff))
    Ke = (area * c)[:, None, None] * (G @ G.transpose(0, 2, 1))
    rows = np.repeat(local, 3, axis=1).ravel()
    cols = np.tile(local, (1, 3)).ravel()
    keep = (rows >= 0) & (cols >= 0)
    A = sp.coo_matrix((Ke.ravel()[keep], (rows[keep], cols[keep])), shape=(grid.m, grid.m)).tocsr()
    A.sum_duplicates()
    # exact symmetry by construction of the storage
    A = 0.5 * (A + A.T)
    A.eliminate_zeros()
    A.sort_indices()
    return A.tocsr()


class GaussianForcing:
    """``c * exp(-((x1 - xi_1)^2 + (x2 - xi_2)^2) / 2) * cos(2 pi x1) * sin(2 pi x2)``.

    The forcing is a product of one function of ``(x1, xi_1)`` and one of
    ``(x2, xi_2)``, which :func:`assemble_rhs` exploits.
    """

    min_params = 2

    def __init__(self, amplitude=100.0):
        self.amplitude = float(amplitude)

    def __call__(self, x1, x2, xi):
        return (
            self.amplitude
            * np.exp(-((x1 - xi[:, 0]) ** 2 + (x2 - xi[:, 1]) ** 2) / 2)
            * np.cos(2 * np.pi * x1)
            * np.sin(2 * np.pi * x2)
        )

    def separable(self, t, xi):
        t = t[:, None]
        g1 = self.amplitude * np.exp(-((t - xi[:, 0]) ** 2) / 2) * np.cos(2 * np.pi * t)
        g2 = np.exp(-((t - xi[:, 1]) ** 2) / 2) * np.sin(2 * np.pi * t)
        return g1, g2


class ConstantForcing:
    min_params = 0

    def __init__(self, value=1.0):
        self.value = float(value)

    def __call__(self, x1, x2, xi):
        return np.full(np.broadcast(x1, x2).shape[:1] + (xi.shape[0],), self.value)

    def separable(self, t, xi):
        return np.full((t.size, xi.shape[0]), self.value), np.ones((t.size, xi.shape[0]))


def _check_forcing(forcing, p):
    need = getattr(forcing, "min_params", 0)
    if p < need:
        raise ConfigError(f"forcing needs at least {need} parameters, got p={p}")


def assemble_load_dense(grid: StructuredGrid, samples: SampleSet, forcing=None) -> np.ndarray:
    """Load vectors ``b(xi_j)`` column by column, shape (m, n)."""
    forcing = GaussianForcing() if forcing is None else forcing
    _check_forcing(forcing, samples.p)
    Q, qa, qb = grid.load_quadrature()
    x1 = (0.5 * grid.h * qa)[:, None]
    x2 = (0.5 * grid.h * qb)[:, None]
    out = np.empty((grid.m, samples.n))
    for j0 in range(0, samples.n, 256):
        F = forcing(x1, x2, samples.xi[j0 : j0 + 256])
        out[:, j0 : j0 + 256] = Q @ F
    return out


def _compress_1d(G, rtol=1e-15):
    u, s, vt = np.linalg.svd(G, full_matrices=False)
    k = max(1, int(np.count_nonzero(s > rtol * s[0]))) if s[0] > 0 else 1
    return u[:, :k], vt[:k].T * s[:k]


def _tail_rank(s, tol, cap):
    if s.size == 0 or s[0] == 0:
        return 0
    tail = np.sqrt(np.cumsum((s**2)[::-1])[::-1])  # tail[k] = ||s[k:]||
    total = tail[0]
    ok = np.nonzero(np.append(tail[1:], 0.0) <= tol * total)[0]
    return int(min(ok[0] + 1, cap))


def assemble_rhs(
    grid: StructuredGrid,
    samples: SampleSet,
    compression_tol: float = 1e-12,
    forcing=None,
    metric: Metric | None = None,
    rank_cap: int = 200,
) -> FactoredAmbient:
    """Factored load block ``B`` compressed to relative P-norm error ``compression_tol``.

    Separable forcings are factored exactly through one-dimensional SVDs of
    the two directional factors before the weighted recompression, so no
    ``m x n`` array is formed.  Other callables are assembled densely.
    """
    forcing = GaussianForcing() if forcing is None else forcing
    _check_forcing(forcing, samples.p)
    if metric is None:
        metric = Metric(assemble_stiffness(grid), samples.weights)
    if hasattr(forcing, "separable"):
        Q, qa, qb = grid.load_quadrature()
        t = 0.5 * grid.h * np.arange(2 * grid.N + 3)
        g1, g2 = forcing.separable(t, samples.xi)
        P1, C1 = _compress_1d(g1)
        P2, C2 = _compress_1d(g2)
        raw = FactoredAmbient(Q @ kt_product(P1[qa], P2[qb]), kt_product(C1, C2))
    else:
        D = assemble_load_dense(grid, samples, forcing)
        raw = FactoredAmbient(D, np.eye(samples.n))
    cap = min(grid.m, samples.n, rank_cap)
    full = weighted_truncated_svd(raw, metric, rank=cap)
    k = max(1, _tail_rank(full.s, compression_tol, cap))
    X = full.truncate(k)
    # keep the weighted orthonormal factors; B = (U diag(s)) V^T
    return FactoredAmbient(X.U * X.s, X.V)


def mass_lump(grid: StructuredGrid) -> np.ndarray:
    """Lumped weights ``w_i = int phi_i`` (equal to ``h^2`` on this mesh)."""
    Q, _, _ = grid.load_quadrature()
    return np.asarray(Q.sum(axis=1)).ravel()


def sample_parameters(n: int, p: int, seed: int) -> SampleSet:
    """``n`` i.i.d. uniform samples on ``[-1, 1]^p`` with weights ``1/n``.

    Draws come from ``numpy.random.Generator(Philox(seed))`` via
    ``uniform(-1, 1, size=(n, p))``, which is counter based and reproducible
    across platforms.
    """
    if n < 1 or p < 1:
        raise ValueError("need n, p >= 1")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    return SampleSet.uniform(rng.uniform(-1.0, 1.0, size=(n, p)))


def build_problem(
    N: int,
    p: int,
    n: int,
    seed: int = 1,
    nonlinear: bool = False,
    forcing=None,
    compression_tol: float = 1e-12,
    rank_cap: int = 200,
    samples: SampleSet | None = None,
) -> ProblemData:
    """Assemble the diffusion test problem (optionally with cubic reaction).

    ``A_0`` is the Laplacian stiffness matrix, which also serves as ``K``;
    ``A_j`` is the stiffness matrix of the ``j``-th coefficient mode.
    """
    grid = StructuredGrid(N)
    samples = sample_parameters(n, p, seed) if samples is None else samples
    forcing = GaussianForcing() if forcing is None else forcing
    _check_forcing(forcing, samples.p)
    A0 = assemble_stiffness(grid)
    mats = [A0] + [assemble_stiffness(grid, kl_mode(j)) for j in range(1, samples.p + 1)]
    xi = build_xi_matrices(samples)
    metric = Metric(A0, xi.xi0)
    B = assemble_rhs(grid, samples, compression_tol, forcing, metric=metric, rank_cap=rank_cap)
    nl = NonlinearitySpec.quartic(mass_lump(grid)) if nonlinear else NonlinearitySpec()
    P = ProblemData(
        AffineOperator(tuple(mats)),
        xi,
        B,
        K=A0,
        nonlinearity=nl,
        kfac=metric.kfac,
        samples=samples,
        meta={"N": grid.N, "h": grid.h, "p": samples.p, "n": samples.n, "seed": seed,
              "nonlinear": bool(nonlinear)},
    )
    P._metrics["preconditioned"] = metric
    return P
