import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from riemlowrank.errors import DimensionMismatch, NotPositiveDefinite
from riemlowrank.fem import StructuredGrid, assemble_stiffness
from riemlowrank.linalg import (
    FactoredAmbient,
    Metric,
    kt_power,
    kt_product,
    spd_factorize,
    spd_solve,
    sym_kt_power,
    weighted_singular_values,
    weighted_truncated_svd,
)

from conftest import random_metric, spd


# SPD factorization ----------------------------------------------------------
def test_identity_factor_and_solve():
    F = spd_factorize(sp.identity(3))
    np.testing.assert_array_equal(F.factor.toarray(), np.eye(3))
    np.testing.assert_array_equal(F.solve(np.array([1.0, 0, 0])), [1.0, 0, 0])


def test_stiffness_solve_residual():
    A = assemble_stiffness(StructuredGrid(3))
    one = np.ones(9)
    assert np.linalg.norm(A @ spd_solve(spd_factorize(A), one) - one) <= 1e-12


@pytest.mark.parametrize("A, index", [
    (np.diag([1.0, -1.0]), 2),
    (np.diag([-1.0, 1.0]), 1),
    (np.diag([1.0, 2.0, 0.0]), 3),
])
def test_not_positive_definite_reports_index(A, index):
    with pytest.raises(NotPositiveDefinite) as err:
        spd_factorize(A)
    assert err.value.index == index


def test_factor_reconstructs_permuted_matrix(rng):
    A = assemble_stiffness(StructuredGrid(6))
    F = spd_factorize(A)
    L = F.factor.toarray()
    Ap = A.toarray()[np.ix_(F.perm, F.perm)]
    np.testing.assert_allclose(L @ L.T, Ap, atol=1e-12)
    # R = L^T P gives A = R^T R
    Y = rng.standard_normal((A.shape[0], 3))
    np.testing.assert_allclose(F.apply_R(F.solve_R(Y)), Y, atol=1e-12)
    RY = F.apply_R(Y)
    np.testing.assert_allclose(RY.T @ RY, Y.T @ A @ Y, rtol=1e-12)


def test_solve_identity_is_noop(rng):
    C = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(spd_solve(spd_factorize(sp.identity(5)), C), C)


def test_solve_diagonal():
    x = spd_solve(spd_factorize(sp.diags([2.0, 4.0])), np.array([[2.0], [4.0]]))
    np.testing.assert_allclose(x, [[1.0], [1.0]])


def test_solve_stiffness_block(rng):
    A = assemble_stiffness(StructuredGrid(15))
    C = rng.standard_normal((225, 8))
    X = spd_solve(spd_factorize(A), C)
    assert np.linalg.norm(A @ X - C) <= 1e-10 * np.linalg.norm(C)


def test_solve_rejects_wrong_rows():
    with pytest.raises(DimensionMismatch):
        spd_factorize(sp.identity(3)).solve(np.ones(4))


def test_asymmetric_input_rejected():
    with pytest.raises(ValueError):
        spd_factorize(np.array([[2.0, 1.0], [0.0, 2.0]]))


# Khatri-Rao products ----------------------------------------------------------
def test_kt_product_examples():
    np.testing.assert_array_equal(kt_product(np.ones((2, 1)), np.ones((2, 1))), np.ones((2, 1)))
    out = kt_product(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
    np.testing.assert_array_equal(out, [[5.0, 10.0], [18.0, 24.0]])


def test_kt_product_row_mismatch():
    with pytest.raises(DimensionMismatch):
        kt_product(np.ones((2, 1)), np.ones((3, 1)))


def test_hadamard_square_from_kt(rng):
    U, V = rng.standard_normal((5, 2)), rng.standard_normal((4, 2))
    S = np.diag(rng.uniform(1, 2, 2))
    X = U @ S @ V.T
    Y = kt_product(U, U) @ np.kron(S, S) @ kt_product(V, V).T
    np.testing.assert_allclose(Y, X**2, rtol=1e-13, atol=1e-13 * np.abs(X**2).max())


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 3)), elements=st.floats(-3, 3)),
    st.integers(2, 4),
)
def test_kt_rows_are_kronecker_powers(A, k):
    P = kt_power(A, k)
    assert P.shape == (A.shape[0], A.shape[1] ** k)
    for i in range(A.shape[0]):
        ref = A[i]
        for _ in range(k - 1):
            ref = np.kron(ref, A[i])
        np.testing.assert_allclose(P[i], ref)


@pytest.mark.parametrize("r, k", [(1, 2), (3, 2), (3, 3), (2, 4), (4, 4)])
def test_sym_kt_power_matches_full_power(rng, r, k):
    A, C = rng.standard_normal((7, r)), rng.standard_normal((5, r))
    full = kt_power(A, k) @ kt_power(C, k).T
    PA, mult, idx = sym_kt_power(A, k)
    PC, _, _ = sym_kt_power(C, k)
    np.testing.assert_allclose((PA * mult) @ PC.T, full, rtol=1e-12, atol=1e-12 * np.abs(full).max())
    assert mult.sum() == r**k


# factored ambient matrices -----------------------------------------------------
def test_factored_arithmetic(rng):
    A = FactoredAmbient(rng.standard_normal((6, 2)), rng.standard_normal((4, 2)), rng.uniform(1, 2, 2))
    B = FactoredAmbient(rng.standard_normal((6, 3)), rng.standard_normal((4, 2)), rng.standard_normal((3, 2)))
    C = FactoredAmbient(rng.standard_normal((6, 1)), rng.standard_normal((4, 1)))
    np.testing.assert_allclose((A + B - C).dense(), A.dense() + B.dense() - C.dense(), atol=1e-12)
    np.testing.assert_allclose((2.5 * B).dense(), 2.5 * B.dense())
    np.testing.assert_allclose(B.T.dense(), B.dense().T)
    M = rng.standard_normal((4, 3))
    np.testing.assert_allclose(B.dot(M), B.dense() @ M, atol=1e-12)
    np.testing.assert_allclose(B.tdot(rng.standard_normal((6, 2))).shape, (4, 2))


def test_factored_shape_checks(rng):
    with pytest.raises(DimensionMismatch):
        FactoredAmbient(np.ones((3, 2)), np.ones((4, 1)))
    with pytest.raises(DimensionMismatch):
        FactoredAmbient(np.ones((3, 2)), np.ones((4, 2)), np.ones(3))
    with pytest.raises(DimensionMismatch):
        FactoredAmbient(np.ones((3, 1)), np.ones((4, 1))) + FactoredAmbient(np.ones((4, 1)), np.ones((4, 1)))


def test_metric_inner_factored_matches_dense(rng):
    met = random_metric(rng, 8, 6)
    A = FactoredAmbient(rng.standard_normal((8, 3)), rng.standard_normal((6, 2)), rng.standard_normal((3, 2)))
    C = FactoredAmbient(rng.standard_normal((8, 2)), rng.standard_normal((6, 2)), rng.uniform(1, 2, 2))
    ref = np.trace(np.diag(met.d) @ A.dense().T @ met.K.toarray() @ C.dense())
    assert met.inner(A, C) == pytest.approx(ref, rel=1e-12)
    assert met.inner(A.dense(), C) == pytest.approx(ref, rel=1e-12)
    assert met.norm_dense(A.dense(), chunk=4) == pytest.approx(met.norm(A), rel=1e-12)


# weighted SVD -------------------------------------------------------------------
def test_unweighted_case_is_standard_svd(rng):
    Z = rng.standard_normal((7, 5))
    X = weighted_truncated_svd(Z, Metric.frobenius(7, 5), rank=3)
    np.testing.assert_allclose(X.s, np.linalg.svd(Z, compute_uv=False)[:3], rtol=1e-12)


def test_exact_truncation_reconstructs(rng):
    met = random_metric(rng, 9, 7)
    Z = FactoredAmbient(rng.standard_normal((9, 3)), rng.standard_normal((7, 3)))
    X = weighted_truncated_svd(Z, met, rank=3)
    assert met.norm(X.dense() - Z.dense()) <= 1e-12 * met.norm(Z)


def test_weighted_orthonormality(rng):
    met = random_metric(rng, 12, 9)
    X = weighted_truncated_svd(rng.standard_normal((12, 9)), met, rank=3)
    ru, rv = X.orthogonality_residuals()
    assert ru <= 1e-12 and rv <= 1e-12


def test_truncation_is_best_in_metric(rng):
    # weighted SVD error equals the tail of the weighted singular values
    met = random_metric(rng, 10, 8)
    Z = rng.standard_normal((10, 8))
    s = weighted_singular_values(Z, met)
    X = weighted_truncated_svd(Z, met, rank=4)
    assert met.norm(Z - X.dense()) == pytest.approx(np.linalg.norm(s[4:]), rel=1e-10)
    # no other rank-4 matrix does better (random competitors)
    for _ in range(5):
        Y = ((X.U + 1e-2 * rng.standard_normal(X.U.shape)) * X.s) @ (X.V + 1e-2 * rng.standard_normal(X.V.shape)).T
        assert met.norm(Z - Y) >= np.linalg.norm(s[4:]) - 1e-12


def test_factored_and_dense_inputs_agree(rng):
    met = random_metric(rng, 8, 6)
    Z = FactoredAmbient(rng.standard_normal((8, 4)), rng.standard_normal((6, 4)), rng.standard_normal((4, 4)))
    A = weighted_truncated_svd(Z, met, rank=2)
    B = weighted_truncated_svd(Z.dense(), met, rank=2)
    np.testing.assert_allclose(A.s, B.s, rtol=1e-12)
    np.testing.assert_allclose(A.dense(), B.dense(), atol=1e-12 * np.abs(B.dense()).max())


def test_rank_deficiency_flagged(rng):
    met = random_metric(rng, 8, 6)
    Z = FactoredAmbient(rng.standard_normal((8, 2)), rng.standard_normal((6, 2)))
    X = weighted_truncated_svd(Z, met, rank=4)
    assert X.rank == 2 and X.info["rank_deficient"] and X.info["numerical_rank"] == 2


def test_tolerance_truncation(rng):
    met = Metric.frobenius(6, 6)
    U, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    Z = U @ np.diag([1, 1e-1, 1e-3, 1e-7, 1e-9, 0]) @ U.T
    assert weighted_truncated_svd(Z, met, tol=1e-5).rank == 3


def test_zero_matrix(rng):
    met = random_metric(rng, 5, 4)
    X = weighted_truncated_svd(FactoredAmbient.zeros(5, 4), met, rank=2)
    assert X.rank == 0
