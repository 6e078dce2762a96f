"""Low-rank approximation of parametrized solution ensembles by Riemannian optimization.

The solution matrix ``X = [x(xi_1), ..., x(xi_n)]`` of ``A(xi) x + g(x) = b(xi)``
is approximated on the manifold of fixed-rank matrices equipped with the
inner product ``<A, C> = tr(Xi_0 A^T K C)``.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .linalg import FactoredAmbient, FixedRankPoint, Metric, spd_factorize, weighted_truncated_svd
from .problem import AffineOperator, NonlinearitySpec, ProblemData, SampleSet, XiMatrices
from .fem import build_problem
from .manifold import TangentVector, project_tangent, retract, transport
from .objective import Objective, ObjectiveConfig, eval_functional, euclid_gradient
from .optimizers import (
    ConvergenceRecord,
    RankAdaptiveConfig,
    RcgConfig,
    RtrConfig,
    random_point,
    rank_adaptive_solve,
    rcg_solve,
    rtr_solve,
)
from .reference import SnapshotMatrix, best_rank_error, relative_error, solve_snapshot

__all__ = [
    "FactoredAmbient", "FixedRankPoint", "Metric", "spd_factorize", "weighted_truncated_svd",
    "AffineOperator", "NonlinearitySpec", "ProblemData", "SampleSet", "XiMatrices",
    "build_problem",
    "TangentVector", "project_tangent", "retract", "transport",
    "Objective", "ObjectiveConfig", "eval_functional", "euclid_gradient",
    "ConvergenceRecord", "RankAdaptiveConfig", "RcgConfig", "RtrConfig",
    "random_point", "rank_adaptive_solve", "rcg_solve", "rtr_solve",
    "SnapshotMatrix", "best_rank_error", "relative_error", "solve_snapshot",
]
