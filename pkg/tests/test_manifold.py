import numpy as np
import pytest

from riemlowrank.errors import AnchorMismatch, IllConditionedPoint
from riemlowrank.linalg import FactoredAmbient, FixedRankPoint, weighted_truncated_svd
from riemlowrank.manifold import (
    TangentVector,
    gauge_residuals,
    inner,
    norm,
    project_normal,
    project_tangent,
    random_tangent,
    retract,
    riemannian_hessian_apply,
    transport,
)
from riemlowrank.optimizers import random_point

from conftest import random_metric


@pytest.fixture
def point(rng):
    return random_point(random_metric(rng, 10, 8), 3, rng)


def _valid_triple(rng, X):
    Up = rng.standard_normal(X.U.shape)
    Up -= X.U @ (X.KU.T @ Up)
    Vp = rng.standard_normal(X.V.shape)
    Vp -= X.V @ (X.DV.T @ Vp)
    return TangentVector(X, rng.standard_normal((X.rank, X.rank)), Up, Vp)


def test_projection_of_tangent_is_identity(rng, point):
    xi = _valid_triple(rng, point)
    eta = project_tangent(point, xi.embed())
    for a, b in [(xi.M, eta.M), (xi.Up, eta.Up), (xi.Vp, eta.Vp)]:
        np.testing.assert_allclose(b, a, atol=1e-12)


def test_projection_of_point_itself(point):
    eta = project_tangent(point, point.factored())
    np.testing.assert_allclose(eta.M, np.diag(point.s), atol=1e-12)
    assert np.abs(eta.Up).max() <= 1e-12 and np.abs(eta.Vp).max() <= 1e-12


def test_projection_is_metric_orthogonal(rng, point):
    met = point.metric
    Z = rng.standard_normal(point.shape)
    R = Z - project_tangent(point, Z).dense()
    for _ in range(20):
        xi = random_tangent(point, rng)
        assert abs(met.inner(R, xi.dense())) <= 1e-11 * met.norm(Z)


def test_projection_factored_and_dense_agree(rng, point):
    Z = FactoredAmbient(rng.standard_normal((10, 4)), rng.standard_normal((8, 4)))
    a, b = project_tangent(point, Z), project_tangent(point, Z.dense())
    np.testing.assert_allclose(a.dense(), b.dense(), atol=1e-12)


def test_inner_product_examples(rng, point):
    z = TangentVector.zeros(point)
    assert inner(point, z, z) == 0.0
    a, b = random_tangent(point, rng), random_tangent(point, rng)
    assert inner(point, a, b) == pytest.approx(inner(point, b, a), abs=1e-13)
    met = point.metric
    ref = np.trace(np.diag(met.d) @ a.dense().T @ met.K.toarray() @ b.dense())
    assert inner(point, a, b) == pytest.approx(ref, abs=1e-12)


def test_anchor_mismatch(rng, point):
    other = random_point(point.metric, 3, rng)
    with pytest.raises(AnchorMismatch):
        random_tangent(point, rng) + random_tangent(other, rng)
    with pytest.raises(AnchorMismatch):
        inner(point, random_tangent(other, rng), random_tangent(other, rng))
    with pytest.raises(AnchorMismatch):
        retract(point, random_tangent(other, rng))


def test_tangent_arithmetic(rng, point):
    a, b = random_tangent(point, rng), random_tangent(point, rng)
    np.testing.assert_allclose((a + 2.0 * b - a).dense(), 2 * b.dense(), atol=1e-12)
    np.testing.assert_allclose(a.axpy(-1.0, a).dense(), 0, atol=1e-14)
    np.testing.assert_allclose((-a).dense(), -a.dense())


# retraction -------------------------------------------------------------------
def test_retract_zero(point):
    Y = retract(point, TangentVector.zeros(point))
    np.testing.assert_allclose(Y.dense(), point.dense(), atol=1e-13 * np.abs(point.dense()).max() + 1e-13)


def test_retraction_is_second_order(rng, point):
    xi = random_tangent(point, rng)
    met = point.metric
    ratios = []
    for t in (1e-2, 1e-3, 1e-4):
        Y = retract(point, xi * t)
        ratios.append(met.norm(Y.dense() - point.dense() - t * xi.dense()) / t**2)
    assert ratios[2] <= 2 * ratios[0] + 1e-6


def test_retraction_output_is_valid_point(rng, point):
    Y = retract(point, random_tangent(point, rng, scale=5.0))
    assert Y.rank == point.rank
    assert max(Y.orthogonality_residuals()) <= 1e-10
    assert np.all(np.diff(Y.s) <= 0) and Y.s[-1] > 0


def test_retraction_pads_rank_deficiency(rng, point):
    # X + xi = rank-1 matrix: X with its last two directions removed
    xi = TangentVector(point, np.diag([0.0, -point.s[1], -point.s[2]]), np.zeros_like(point.U), np.zeros_like(point.V))
    Y = retract(point, xi)
    assert Y.rank == 3 and Y.info["padded"] == 2
    assert max(Y.orthogonality_residuals()) <= 1e-10
    assert np.all(np.diff(Y.s) < 0)
    np.testing.assert_allclose(Y.dense(), point.truncate(1).dense(), atol=1e-6 * point.s[0])


# transport ---------------------------------------------------------------------
def test_transport_to_same_point(rng, point):
    xi = random_tangent(point, rng)
    np.testing.assert_allclose(transport(point, xi).dense(), xi.dense(), atol=1e-12)


def test_transport_gauge_and_nonexpansive(rng, point):
    xi = random_tangent(point, rng)
    Y = retract(point, random_tangent(point, rng, scale=0.3))
    eta = transport(Y, xi)
    assert eta.point is Y
    assert max(gauge_residuals(eta)) <= 1e-12
    assert norm(Y, eta) <= norm(point, xi) * (1 + 1e-12)


# normal projection ---------------------------------------------------------------
def test_normal_projection(rng, point):
    met = point.metric
    xi = random_tangent(point, rng)
    assert met.norm(project_normal(point, xi.embed())) <= 1e-12 * met.norm(xi.embed())
    Z = FactoredAmbient(rng.standard_normal((10, 3)), rng.standard_normal((8, 3)))
    N = project_normal(point, Z)
    for _ in range(20):
        eta = random_tangent(point, rng)
        assert abs(met.inner(N, eta.embed())) <= 1e-11 * met.norm(Z)
    np.testing.assert_allclose(project_tangent(point, Z).dense() + N.dense(), Z.dense(), atol=1e-12)


# Hessian from Euclidean quantities ------------------------------------------------
def test_hessian_zero_inputs(rng, point):
    H = random_tangent(point, rng)
    Zero = FactoredAmbient.zeros(*point.shape)
    out = riemannian_hessian_apply(point, H, Zero, Zero)
    assert max(np.abs(out.M).max(), np.abs(out.Up).max(), np.abs(out.Vp).max()) == 0.0


def _symmetric_hessian_op(rng, X):
    """Euclidean gradient/Hessian of f(Z) = 1/2 <Z, L(Z)>_P - <C, Z>_P, L metric-self-adjoint."""
    met = X.metric
    m, n = X.shape
    Kd = met.K.toarray()
    S1 = rng.standard_normal((m, m))
    S1 = S1 @ S1.T
    S2 = np.diag(rng.uniform(0.5, 2, n))
    Ki = np.linalg.inv(Kd)

    def L(Z):  # metric representative of Z -> S1 Z S2 in the Frobenius sense
        return Ki @ S1 @ Z @ S2 / met.d[None, :]

    C = rng.standard_normal((m, n))
    return (lambda Z: L(Z) - C), L


def test_hessian_is_self_adjoint_and_linear(rng, point):
    egrad, ehess = _symmetric_hessian_op(rng, point)
    Z = egrad(point.dense())

    def hess(H):
        return riemannian_hessian_apply(point, H, Z, ehess(H.dense()))

    H1, H2 = random_tangent(point, rng), random_tangent(point, rng)
    lhs, rhs = inner(point, hess(H1), H2), inner(point, H1, hess(H2))
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)
    combo = hess(2.0 * H1 - 0.5 * H2).dense()
    np.testing.assert_allclose(combo, 2.0 * hess(H1).dense() - 0.5 * hess(H2).dense(), atol=1e-12 * np.abs(combo).max())


def test_hessian_rejects_tiny_singular_values(rng):
    met = random_metric(rng, 6, 5)
    X = random_point(met, 2, rng)
    bad = FixedRankPoint(X.U, np.array([1.0, 1e-16]), X.V, met)
    Z = FactoredAmbient.zeros(6, 5)
    with pytest.raises(IllConditionedPoint):
        riemannian_hessian_apply(bad, TangentVector.zeros(bad), Z, Z)


def test_gauge_of_random_tangent(rng, point):
    assert max(gauge_residuals(random_tangent(point, rng))) <= 1e-12
    assert norm(point, random_tangent(point, rng, scale=3.0)) == pytest.approx(3.0)
