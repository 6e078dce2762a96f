"""Shared builders and dense reference implementations for the tests."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from riemlowrank.linalg import FactoredAmbient, Metric
from riemlowrank.problem import AffineOperator, NonlinearitySpec, ProblemData, SampleSet, build_xi_matrices


def spd(rng, m, shift=None):
    """Dense random SPD matrix as exactly symmetric CSR."""
    G = rng.standard_normal((m, m))
    A = G @ G.T + (m if shift is None else shift) * np.eye(m)
    return sp.csr_matrix(0.5 * (A + A.T))


def sym(rng, m, scale=1.0):
    G = scale * rng.standard_normal((m, m))
    return sp.csr_matrix(0.5 * (G + G.T))


def small_problem(rng, m=7, n=5, p=2, nonlinear=False, k_is_a0=True, rhs_rank=2):
    """Random affine problem with ``A(xi)`` uniformly SPD on ``[-1, 1]^p``."""
    A0 = spd(rng, m)
    lam = np.linalg.eigvalsh(A0.toarray()).min()
    mats = [A0]
    for _ in range(p):
        Ai = sym(rng, m)
        nrm = np.abs(np.linalg.eigvalsh(Ai.toarray())).max()
        mats.append(sp.csr_matrix(Ai * (0.4 * lam / (p * nrm))))
    samples = SampleSet(rng.uniform(-1, 1, (n, p)), rng.uniform(0.5, 1.5, n))
    B = FactoredAmbient(rng.standard_normal((m, rhs_rank)), rng.standard_normal((n, rhs_rank)))
    K = None if k_is_a0 else spd(rng, m)
    nl = NonlinearitySpec.quartic(rng.uniform(0.5, 1.5, m)) if nonlinear else NonlinearitySpec()
    return ProblemData(AffineOperator(tuple(mats)), build_xi_matrices(samples), B, K=K,
                       nonlinearity=nl, samples=samples)


def random_metric(rng, m, n):
    return Metric(spd(rng, m), rng.uniform(0.5, 2.0, n))


# dense oracles --------------------------------------------------------------
def dense_functional(P, X):
    X = np.asarray(X)
    val = 0.0
    for A, xi in zip(P.operator.mats, P.xi.diags):
        val += 0.5 * np.sum(X * ((A @ X) * xi[None, :]))
    val -= np.sum(X * (P.B.dense() * P.xi.xi0[None, :]))
    if P.nonlinearity.active:
        val += 0.25 * P.nonlinearity.w @ (X**4) @ P.xi.xi0
    return float(val)


def dense_frobenius_gradient(P, X):
    X = np.asarray(X)
    G = sum((A @ X) * xi[None, :] for A, xi in zip(P.operator.mats, P.xi.diags))
    G = G - P.B.dense() * P.xi.xi0[None, :]
    if P.nonlinearity.active:
        G = G + P.nonlinearity.w[:, None] * X**3 * P.xi.xi0[None, :]
    return np.asarray(G)


def dense_metric_gradient(P, X, metric):
    G = dense_frobenius_gradient(P, X)
    return np.linalg.solve(metric.K.toarray(), G) / metric.d[None, :]


def dense_snapshot(P):
    """Column-by-column solves of the (nonlinear) per-sample systems."""
    from scipy.optimize import root

    cols = []
    Bd = P.B.dense()
    for j in range(P.n):
        A = P.sample_operator(j).toarray()
        x = np.linalg.solve(A, Bd[:, j])
        if P.nonlinearity.active:
            w = P.nonlinearity.w
            sol = root(lambda y: A @ y + w * y**3 - Bd[:, j], x,
                       jac=lambda y: A + np.diag(3 * w * y**2), tol=1e-14)
            x = sol.x
        cols.append(x)
    return np.column_stack(cols)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# acceptance report -------------------------------------------------------------
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
