import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from riemlowrank.errors import ConfigError
from riemlowrank.fem import (
    ConstantForcing,
    GaussianForcing,
    StructuredGrid,
    assemble_load_dense,
    assemble_rhs,
    assemble_stiffness,
    build_problem,
    kl_coefficient,
    kl_mode,
    mass_lump,
    sample_parameters,
)
from riemlowrank.linalg import Metric
from riemlowrank.problem import SampleSet


@pytest.mark.parametrize("j, kl, amp", [
    (1, (1, 1), 1 / 2),
    (2, (1, 2), 1 / 5),
    (3, (2, 1), 1 / 5),
    (4, (1, 3), 1 / 10),
    (6, (3, 1), 1 / 10),
    (7, (1, 4), 1 / 17),
])
def test_kl_mode_ordering(j, kl, amp):
    mode = kl_mode(j)
    assert (mode.k, mode.l) == kl
    assert mode.amplitude == pytest.approx(amp)


def test_kl_coefficient_is_uniformly_positive(rng):
    x = rng.uniform(0, 1, (2, 500))
    for _ in range(20):
        c = kl_coefficient(rng.uniform(-1, 1, 5))(x[0], x[1])
        assert c.min() > 0


def test_stiffness_is_five_point_stencil():
    A = assemble_stiffness(StructuredGrid(3)).toarray()
    assert A[4, 4] == pytest.approx(4.0)
    for nb in (1, 3, 5, 7):
        assert A[4, nb] == pytest.approx(-1.0)
    for diag_nb in (0, 2, 6, 8):
        assert A[4, diag_nb] == 0.0


def test_stiffness_independent_of_h():
    A3 = assemble_stiffness(StructuredGrid(3)).toarray()
    A7 = assemble_stiffness(StructuredGrid(7)).toarray()
    assert np.unique(np.round(A3[A3 != 0], 12)).tolist() == np.unique(np.round(A7[A7 != 0], 12)).tolist()


def test_first_mode_matrix_bounded_by_laplacian():
    g = StructuredGrid(7)
    A0 = assemble_stiffness(g)
    A1 = assemble_stiffness(g, kl_mode(1))
    assert (A1 - A1.T).count_nonzero() == 0
    n0 = spla.eigsh(A0, k=1, which="LM", return_eigenvectors=False)[0]
    n1 = np.abs(spla.eigsh(A1, k=1, which="LM", return_eigenvectors=False)[0])
    assert n1 <= 0.5 * n0


def test_stiffness_coefficient_is_linear():
    g = StructuredGrid(5)
    c = kl_coefficient([0.3, -0.7])
    A = assemble_stiffness(g, c)
    ref = assemble_stiffness(g) + 0.3 * assemble_stiffness(g, kl_mode(1)) - 0.7 * assemble_stiffness(g, kl_mode(2))
    np.testing.assert_allclose(A.toarray(), ref.toarray(), atol=1e-13)


def test_nodes_numbering():
    g = StructuredGrid(3)
    nodes = g.nodes()
    np.testing.assert_allclose(nodes[1], [0.5, 0.25])  # x1 runs fastest
    np.testing.assert_allclose(nodes[3], [0.25, 0.5])


# load vectors --------------------------------------------------------------
def test_constant_forcing_is_rank_one_along_lumped_weights(rng):
    g = StructuredGrid(7)
    s = SampleSet.uniform(rng.uniform(-1, 1, (9, 2)))
    B = assemble_rhs(g, s, forcing=ConstantForcing(3.0))
    assert B.width == 1
    col = B.left[:, 0] / B.left[0, 0]
    np.testing.assert_allclose(col, mass_lump(g) / mass_lump(g)[0], rtol=1e-12)
    np.testing.assert_allclose(B.dense(), 3.0 * np.outer(mass_lump(g), np.ones(9)), rtol=1e-12)


def test_single_sample_rhs_has_rank_one(rng):
    B = assemble_rhs(StructuredGrid(7), SampleSet.uniform(rng.uniform(-1, 1, (1, 2))))
    assert B.width == 1


def test_compressed_rhs_matches_dense_assembly():
    g = StructuredGrid(15)
    s = sample_parameters(256, 4, seed=1)
    met = Metric(assemble_stiffness(g), s.weights)
    B = assemble_rhs(g, s, 1e-12, metric=met)
    dense = assemble_load_dense(g, s)
    assert met.norm(B.dense() - dense) <= 1e-12 * met.norm_dense(dense)


def test_separable_forcing_matches_pointwise(rng):
    f = GaussianForcing()
    t = rng.uniform(0, 1, 6)
    xi = rng.uniform(-1, 1, (4, 3))
    g1, g2 = f.separable(t, xi)
    for a in range(6):
        for b in range(6):
            np.testing.assert_allclose(g1[a] * g2[b], f(t[a], t[b], xi), rtol=1e-13)


def test_forcing_needs_two_parameters(rng):
    with pytest.raises(ConfigError):
        assemble_rhs(StructuredGrid(3), SampleSet.uniform(rng.uniform(-1, 1, (4, 1))))


def test_load_quadrature_integrates_linears_exactly():
    # int phi_i = h^2 and int x1 phi_i = x1_i h^2 on the uniform mesh
    g = StructuredGrid(5)
    Q, qa, qb = g.load_quadrature()
    x1 = 0.5 * g.h * qa
    np.testing.assert_allclose(Q @ np.ones(qa.size), g.h**2, rtol=1e-13)
    np.testing.assert_allclose(Q @ x1, g.nodes()[:, 0] * g.h**2, rtol=1e-13)


# lumped weights --------------------------------------------------------------
def test_lumped_weights_equal_h2():
    g = StructuredGrid(3)
    np.testing.assert_allclose(mass_lump(g), 1 / 16)
    g = StructuredGrid(10)
    w = mass_lump(g)
    np.testing.assert_allclose(w, g.h**2, rtol=1e-13)
    assert w.sum() <= 1.0


# parameters -------------------------------------------------------------------
def test_sampling_is_deterministic():
    a, b = sample_parameters(50, 3, 7), sample_parameters(50, 3, 7)
    np.testing.assert_array_equal(a.xi, b.xi)
    assert not np.array_equal(a.xi, sample_parameters(50, 3, 8).xi)


def test_sampling_moments():
    s = sample_parameters(10_000, 1, 1)
    assert abs(s.xi.mean()) <= 0.02
    assert s.xi.var() == pytest.approx(1 / 3, rel=0.1)
    assert np.all(np.abs(s.xi) <= 1)
    np.testing.assert_allclose(s.weights, 1e-4)


# discretization ----------------------------------------------------------------
def _nodal_solution(N, xi):
    g = StructuredGrid(N)
    s = SampleSet.uniform(np.atleast_2d(xi))
    A = assemble_stiffness(g, kl_coefficient(xi))
    b = assemble_load_dense(g, s)[:, 0]
    return spla.spsolve(A.tocsc(), b).reshape(N, N)


def test_nodal_values_converge_at_second_order():
    xi = np.array([0.4, -0.6, 0.2])
    ref = _nodal_solution(63, xi)
    errs = []
    for N in (7, 15):
        stride = 64 // (N + 1)
        sub = ref[stride - 1 :: stride, stride - 1 :: stride]
        errs.append(np.abs(_nodal_solution(N, xi) - sub).max())
    # h^2 with the reference error subtracted: (1/64 - 1/4096) / (1/256 - 1/4096) = 4.2
    assert 3.5 <= errs[0] / errs[1] <= 5.0


def test_build_problem_dimensions():
    P = build_problem(5, 3, 16, seed=2, nonlinear=True)
    assert (P.m, P.n, P.p) == (25, 16, 3)
    assert P.k_is_a0 and P.nonlinearity.active
    np.testing.assert_allclose(P.nonlinearity.w, StructuredGrid(5).h ** 2)
    assert P.meta["N"] == 5 and P.meta["seed"] == 2
