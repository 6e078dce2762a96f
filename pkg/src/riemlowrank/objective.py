"""Factored evaluation of the energy functional and its derivatives.

For ``X = U diag(s) V^T`` the functional is

    F(X) = 1/2 sum_i tr(X^T A_i X Xi_i) - tr(X^T B Xi_0) + 1/4 w^T X**4 m

where ``X**4`` is the entrywise power and ``m = diag(Xi_0)``.  Gradients are
returned as Riesz representatives in the metric of the point, i.e. the
Frobenius gradient ``G`` mapped to ``K^{-1} G D^{-1}``.

Entrywise powers of factored matrices use transposed Khatri-Rao products.
Internally the duplicate columns of ``U ⋉ U ⋉ ...`` are merged
(:func:`~riemlowrank.linalg.sym_kt_power`), which gives the same numbers with
``binom(r + k - 1, k)`` instead of ``r**k`` columns.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import DimensionMismatch, NearDegenerateSpectrum
from .linalg import FactoredAmbient, FixedRankPoint, kt_power, kt_product, sym_kt_power
from .manifold import TangentVector, project_tangent, riemannian_hessian_apply
from .problem import ProblemData, apply_affine_block

__all__ = [
    "ObjectiveConfig",
    "eval_functional",
    "quadratic_value",
    "quad_curvature",
    "hadamard_power_factors",
    "euclid_gradient",
    "euclid_hess_apply",
    "truncation_derivative_adjoint",
    "compressed_nonlinear_gradient",
    "riemannian_gradient",
    "riemannian_hessian",
    "Objective",
    "GAP_RTOL",
]

# minimal relative gap sigma_rt - sigma_{rt+1} for the truncation to be differentiable
GAP_RTOL = 1e-10
_ROW_CHUNK = 2048


@dataclass(frozen=True)
class ObjectiveConfig:
    """How the nonlinear term is evaluated and which metric represents gradients.

    Parameters
    ----------
    nonlinearity : {"exact", "compressed"}
        ``"compressed"`` replaces ``X`` by its best rank-``r_tilde`` truncation
        inside the quartic term.
    r_tilde : int, optional
        Truncation rank; overrides ``ratio``.
    ratio : float
        Used when ``r_tilde`` is not given: ``r_tilde = ceil(ratio * r)``.
    metric : {"preconditioned", "frobenius"}
    """

    nonlinearity: str = "exact"
    r_tilde: int | None = None
    ratio: float = 0.5
    metric: str = "preconditioned"

    def __post_init__(self):
        if self.nonlinearity not in ("exact", "compressed"):
            raise ValueError(f"unknown nonlinearity handling {self.nonlinearity!r}")
        if self.r_tilde is not None and self.r_tilde < 1:
            raise ValueError("r_tilde must be at least 1")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if self.metric not in ("preconditioned", "frobenius"):
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def compressed(self):
        return self.nonlinearity == "compressed"

    def rank_tilde(self, r):
        rt = self.r_tilde if self.r_tilde is not None else ceil(self.ratio * r)
        return int(max(1, min(rt, r)))


_DEFAULT = ObjectiveConfig()


def _k_is_a0(P: ProblemData, metric):
    return metric is P.metric("preconditioned") and P.k_is_a0


def _nonlinear_point(P, X, cfg):
    """The matrix entering the quartic term: ``X`` or its truncation."""
    if cfg.compressed:
        return X.truncate(cfg.rank_tilde(X.rank))
    return X


# functional ================================================================
def quadratic_value(P: ProblemData, Phi, Psi):
    """Quadratic and linear part of ``F`` at ``X = Phi Psi^T``."""
    AP = apply_affine_block(P.operator, Phi)
    val = 0.0
    for Ai_Phi, xi in zip(AP, P.xi.diags):
        val += 0.5 * np.sum((Phi.T @ Ai_Phi) * (Psi.T @ (xi[:, None] * Psi)))
    Bl = P.B.left_core()
    val -= np.sum((Phi.T @ Bl) * (Psi.T @ (P.xi.xi0[:, None] * P.B.right)))
    return float(val)


def _quartic_value(w, m, L, R):
    """``w^T (L R^T)**4 m`` through the merged Khatri-Rao fourth power."""
    _, mult, idx = sym_kt_power(L[:1], 4)
    lw = np.zeros(idx.shape[0])
    rm = np.zeros(idx.shape[0])
    for i0 in range(0, L.shape[0], _ROW_CHUNK):
        Pl, _, _ = sym_kt_power(L[i0 : i0 + _ROW_CHUNK], 4)
        lw += w[i0 : i0 + _ROW_CHUNK] @ Pl
    for j0 in range(0, R.shape[0], _ROW_CHUNK):
        Pr, _, _ = sym_kt_power(R[j0 : j0 + _ROW_CHUNK], 4)
        rm += m[j0 : j0 + _ROW_CHUNK] @ Pr
    return float(np.sum(mult * lw * rm))


def eval_functional(P: ProblemData, X: FixedRankPoint, cfg: ObjectiveConfig = _DEFAULT) -> float:
    """Energy functional at ``X`` (compressed quartic term in compressed mode)."""
    if X.shape != (P.m, P.n):
        raise DimensionMismatch(f"point {X.shape} vs problem {(P.m, P.n)}")
    Us = X.U * X.s
    val = quadratic_value(P, Us, X.V)
    if P.nonlinearity.active and X.rank:
        T = _nonlinear_point(P, X, cfg)
        val += 0.25 * _quartic_value(P.nonlinearity.w, P.xi.xi0, T.U * T.s, T.V)
    return val


def quad_curvature(P: ProblemData, H) -> float:
    """``sum_i <A_i H Xi_i, H>_F``, the curvature of the quadratic part along ``H``."""
    if isinstance(H, TangentVector):
        H = H.embed()
    Hl, Hr = H.left_core(), H.right
    AH = apply_affine_block(P.operator, Hl)
    return float(
        sum(np.sum((Hl.T @ AiH) * (Hr.T @ (xi[:, None] * Hr))) for AiH, xi in zip(AH, P.xi.diags))
    )


# Khatri-Rao powers =========================================================
def hadamard_power_factors(X: FixedRankPoint, k: int) -> FactoredAmbient:
    """Factors ``(U^{⋉k}, s^{⊗k}, V^{⋉k})`` of the entrywise power ``X**k``."""
    if k not in (2, 3, 4):
        raise ValueError("k must be 2, 3 or 4")
    core = kt_power(X.s[None, :], k).ravel()
    return FactoredAmbient(kt_power(X.U, k), kt_power(X.V, k), core)


def _sym_power(L, R, k):
    """Merged factors with ``(L R^T)**k = Lk Rk^T``."""
    Pl, mult, _ = sym_kt_power(L, k)
    Pr, _, _ = sym_kt_power(R, k)
    return Pl * mult, Pr


# gradient ==================================================================
def _gradient_blocks(P, X, metric):
    """Linear-quadratic gradient as (solve-needed lefts, direct lefts, rights)."""
    d = metric.d
    Us = X.U * X.s
    AU = apply_affine_block(P.operator, Us)
    solve_l, solve_r, direct_l, direct_r = [], [], [], []
    skip0 = _k_is_a0(P, metric)
    for i, (AiU, xi) in enumerate(zip(AU, P.xi.diags)):
        right = (xi / d)[:, None] * X.V
        if i == 0 and skip0:
            direct_l.append(Us)
            direct_r.append(right)
        else:
            solve_l.append(AiU)
            solve_r.append(right)
    solve_l.append(-P.B.left_core())
    solve_r.append((P.xi.xi0 / d)[:, None] * P.B.right)
    return solve_l, solve_r, direct_l, direct_r


def _assemble(metric, solve_l, solve_r, direct_l, direct_r):
    left = list(direct_l)
    right = list(direct_r)
    if solve_l:
        left.append(metric.kfac.solve(np.hstack(solve_l)))
        right.extend(solve_r)
    return FactoredAmbient(np.hstack(left), np.hstack(right))


def euclid_gradient(P: ProblemData, X: FixedRankPoint, cfg: ObjectiveConfig = _DEFAULT) -> FactoredAmbient:
    """Gradient of ``F`` in the metric of ``X``, factored.

    Left factor ``K^{-1}[A_0 U S, ..., A_p U S, -B_l, W X3_l]`` and right
    factor ``D^{-1}[Xi_0 V, ..., Xi_p V, Xi_0 B_r, Xi_0 X3_r]``; the exact
    quartic block is the merged Khatri-Rao cube.  In compressed mode the
    nonlinear block comes from :func:`compressed_nonlinear_gradient`.
    """
    metric = X.metric
    solve_l, solve_r, direct_l, direct_r = _gradient_blocks(P, X, metric)
    extra = None
    if P.nonlinearity.active and X.rank:
        if cfg.compressed:
            extra = compressed_nonlinear_gradient(P, X, cfg.rank_tilde(X.rank))
        else:
            L3, R3 = _sym_power(X.U * X.s, X.V, 3)
            solve_l.append(P.nonlinearity.w[:, None] * L3)
            solve_r.append((P.xi.xi0 / metric.d)[:, None] * R3)
    G = _assemble(metric, solve_l, solve_r, direct_l, direct_r)
    return G if extra is None else G + extra


def euclid_hess_apply(
    P: ProblemData, X: FixedRankPoint, H, cfg: ObjectiveConfig = _DEFAULT
) -> FactoredAmbient:
    """Directional derivative of :func:`euclid_gradient` along the ambient ``H``.

    ``K^{-1}[sum_i A_i H Xi_i + 3 W (X**2 * H) Xi_0] D^{-1}``; the entrywise
    product is factored as ``(X2_l ⋉ H_l)(X2_r ⋉ H_r)^T``.  In compressed mode
    ``X`` is replaced by its truncation and the derivative of the truncation
    itself is ignored (Gauss-Newton type model).
    """
    if isinstance(H, TangentVector):
        H = H.embed()
    metric = X.metric
    d = metric.d
    Hl, Hr = H.left_core(), H.right
    AH = apply_affine_block(P.operator, Hl)
    solve_l, solve_r, direct_l, direct_r = [], [], [], []
    skip0 = _k_is_a0(P, metric)
    for i, (AiH, xi) in enumerate(zip(AH, P.xi.diags)):
        right = (xi / d)[:, None] * Hr
        if i == 0 and skip0:
            direct_l.append(Hl)
            direct_r.append(right)
        else:
            solve_l.append(AiH)
            solve_r.append(right)
    if P.nonlinearity.active and X.rank:
        T = _nonlinear_point(P, X, cfg)
        L2, R2 = _sym_power(T.U * T.s, T.V, 2)
        solve_l.append(3.0 * P.nonlinearity.w[:, None] * kt_product(L2, Hl))
        solve_r.append((P.xi.xi0 / d)[:, None] * kt_product(R2, Hr))
    return _assemble(metric, solve_l, solve_r, direct_l, direct_r)


# truncation adjoint ========================================================
def _check_gap(s, rt):
    gap = s[rt - 1] - s[rt]
    if gap < GAP_RTOL * s[0]:
        raise NearDegenerateSpectrum(
            f"gap sigma_{rt} - sigma_{rt + 1} = {gap:.3e} is below {GAP_RTOL} * sigma_1"
        )


def _adjoint_pieces(Y: FixedRankPoint, Omega: FactoredAmbient, rt: int):
    """``(A, B)`` with adjoint ``= (K U_k) A^T + B (D V_k)^T``; ``B`` split as ``(B_omega, B_kd)``.

    ``B = Omega V_k + K U_d A2``; both parts are returned so callers that
    multiply by ``K^{-1}`` can skip the solve on the second.
    """
    r = Y.rank
    s = Y.s
    U, V = Y.U, Y.V
    Uk, Vk = U[:, :rt], V[:, :rt]
    OtU = Omega.tdot(U)  # n x r, Omega^T U
    OV = Omega.dot(Vk)  # m x rt
    UOV = OtU.T @ V  # r x r, U^T Omega V
    Okk = UOV[:rt, :rt]
    DVk = Y.DV[:, :rt]
    A = OtU[:, :rt] - DVk @ Okk.T
    if rt < r:
        _check_gap(s, rt)
        sk, sd = s[:rt], s[rt:]
        den = sk[None, :] ** 2 - sd[:, None] ** 2  # rows discarded, columns kept
        Xi_m1 = sd[:, None] ** 2 / den  # Xi - 1
        Psi = sk[None, :] * sd[:, None] / den
        O12 = UOV[:rt, rt:]  # kept x discarded
        O21 = UOV[rt:, :rt]  # discarded x kept
        A1 = Psi.T * O21.T + Xi_m1.T * O12
        A2 = Psi * O12.T + Xi_m1 * O21
        A = A + Y.DV[:, rt:] @ A1.T
        Bkd = U[:, rt:] @ A2  # multiplied by K by the caller when needed
    else:
        Bkd = None
    return A, OV, Bkd


def truncation_derivative_adjoint(Y: FixedRankPoint, Omega, r_tilde: int) -> FactoredAmbient:
    """Frobenius adjoint of the derivative of the weighted rank-``r_tilde`` truncation at ``Y``.

    With ``Omega_12 = U_k^T Omega V_d`` and ``Omega_21 = U_d^T Omega V_k``
    (``k`` kept, ``d`` discarded singular triplets of ``Y``) the adjoint is

        K U_k U_k^T Omega + Omega V_k V_k^T D - K U_k U_k^T Omega V_k V_k^T D
        + K U_k [Psi^T * Omega_21^T + (Xi^T - 1) * Omega_12] V_d^T D
        + K U_d [Psi * Omega_12^T + (Xi - 1) * Omega_21] V_k^T D

    with ``Xi[d, k] = s_k^2 / (s_k^2 - s_d^2)`` and
    ``Psi[d, k] = s_k s_d / (s_k^2 - s_d^2)``.

    Raises
    ------
    NearDegenerateSpectrum
        If ``s[r_tilde-1] - s[r_tilde] < GAP_RTOL * s[0]``.
    """
    if not isinstance(Omega, FactoredAmbient):
        Omega = FactoredAmbient(np.asarray(Omega, dtype=float), np.eye(Y.shape[1]))
    if Omega.shape != Y.shape:
        raise DimensionMismatch(f"Omega {Omega.shape} vs point {Y.shape}")
    rt = int(r_tilde)
    if not 1 <= rt <= Y.rank:
        raise ValueError(f"r_tilde must lie in [1, {Y.rank}]")
    A, OV, Bkd = _adjoint_pieces(Y, Omega, rt)
    B = OV if Bkd is None else OV + np.asarray(Y.metric.K @ Bkd)
    return FactoredAmbient(np.hstack([Y.KU[:, :rt], B]), np.hstack([A, Y.DV[:, :rt]]))


def compressed_nonlinear_gradient(P: ProblemData, X: FixedRankPoint, r_tilde: int) -> FactoredAmbient:
    """Metric gradient of ``1/4 w^T T(X)**4 m`` with ``T`` the rank-``r_tilde`` truncation.

    Equals ``K^{-1} adj[Omega] D^{-1}`` with ``Omega = diag(w) T(X)**3 Xi_0``,
    where ``adj`` is :func:`truncation_derivative_adjoint`.  ``K`` cancels on
    the kept-vector blocks, so only ``Omega V_k`` needs a solve.
    """
    metric = X.metric
    rt = int(min(r_tilde, X.rank))
    m, n = X.shape
    if not P.nonlinearity.active or X.rank == 0:
        return FactoredAmbient.zeros(m, n)
    T = X.truncate(rt)
    L3, R3 = _sym_power(T.U * T.s, T.V, 3)
    Omega = FactoredAmbient(P.nonlinearity.w[:, None] * L3, P.xi.xi0[:, None] * R3)
    A, OV, Bkd = _adjoint_pieces(X, Omega, rt)
    left_b = metric.kfac.solve(OV)
    if Bkd is not None:
        left_b = left_b + Bkd
    return FactoredAmbient(
        np.hstack([X.U[:, :rt], left_b]), np.hstack([A / metric.d[:, None], X.V[:, :rt]])
    )


# Riemannian quantities =====================================================
def riemannian_gradient(P: ProblemData, X: FixedRankPoint, cfg: ObjectiveConfig = _DEFAULT) -> TangentVector:
    return project_tangent(X, euclid_gradient(P, X, cfg))


def riemannian_hessian(
    P: ProblemData, X: FixedRankPoint, H: TangentVector, cfg: ObjectiveConfig = _DEFAULT, egrad=None
) -> TangentVector:
    if egrad is None:
        egrad = euclid_gradient(P, X, cfg)
    return riemannian_hessian_apply(X, H, egrad, euclid_hess_apply(P, X, H.embed(), cfg))


class Objective:
    """Value/gradient/Hessian of ``F`` with a one-point cache.

    Solvers evaluate value and gradient at the same iterate repeatedly; the
    cache is keyed on point identity.
    """

    def __init__(self, P: ProblemData, cfg: ObjectiveConfig = _DEFAULT):
        self.P = P
        self.cfg = cfg
        self._point = None
        self._cache = {}

    @property
    def metric(self):
        return self.P.metric(self.cfg.metric)

    def _at(self, X):
        if X is not self._point:
            self._point = X
            self._cache = {}
        return self._cache

    def value(self, X):
        c = self._at(X)
        if "f" not in c:
            c["f"] = eval_functional(self.P, X, self.cfg)
        return c["f"]

    def egrad(self, X):
        c = self._at(X)
        if "eg" not in c:
            c["eg"] = euclid_gradient(self.P, X, self.cfg)
        return c["eg"]

    def rgrad(self, X):
        c = self._at(X)
        if "rg" not in c:
            c["rg"] = project_tangent(X, self.egrad(X))
        return c["rg"]

    def hess(self, X, H):
        return riemannian_hessian_apply(X, H, self.egrad(X), euclid_hess_apply(self.P, X, H.embed(), self.cfg))

    def curvature(self, H):
        return quad_curvature(self.P, H)

    def residual(self, X):
        """Metric norm of the full (not projected) gradient."""
        return X.metric.norm(self.egrad(X))
