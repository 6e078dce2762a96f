"""Declarative experiment configuration (YAML validated by pydantic).

A config file has the blocks ``problem``, ``solver``, ``metric``,
``output`` and optionally ``compare``; unknown keys anywhere are rejected.
Example::

    name: table1-m225
    problem: {N: 15, p: 4, n: 256, seed: 1}
    solver:
      method: rcg
      rank: 16
      rcg: {tol: 1.0e-6}
    metric: {mode: preconditioned}
    output: {dir: runs/table1-m225}
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .fem import GaussianForcing
from .objective import ObjectiveConfig
from .optimizers import RankAdaptiveConfig, RcgConfig, RtrConfig

__all__ = [
    "ProblemBlock",
    "CompressionBlock",
    "SolverBlock",
    "MetricBlock",
    "OutputBlock",
    "CompareMethod",
    "CompareBlock",
    "ExperimentConfig",
    "load_config",
    "parse_config",
]

# matrices beyond this size are only built with an explicit opt-in
DESK_MAX_M = 4000
DESK_MAX_N = 1024


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CompressionBlock(_Strict):
    """How the quartic term is evaluated: exactly or on a rank-``r_tilde`` truncation."""

    mode: Literal["exact", "compressed"] = "exact"
    r_tilde: int | None = Field(default=None, ge=1)
    ratio: float = Field(default=0.5, gt=0, le=1)


class ProblemBlock(_Strict):
    N: int = Field(ge=2)
    p: int = Field(ge=1)
    n: int = Field(ge=1)
    seed: int = 1
    nonlinear: bool = False
    compression: CompressionBlock = CompressionBlock()
    rhs_tol: float = Field(default=1e-12, gt=0)
    rhs_rank_cap: int = Field(default=200, ge=1)
    # reuse a container written by `assemble` instead of assembling again
    container: str | None = None

    @model_validator(mode="after")
    def _forcing_needs_two_params(self):
        need = GaussianForcing.min_params
        if self.p < need:
            raise ValueError(f"the forcing term depends on xi_1..xi_{need}; p={self.p} is too small")
        return self

    @property
    def m(self):
        return self.N**2


class RcgBlock(_Strict):
    tol: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=1000, ge=1)
    relative: bool = False
    powell_restart: float | None = 0.2

    def build(self):
        return RcgConfig(tol=self.tol, max_iter=self.max_iter, relative=self.relative,
                         powell_restart=self.powell_restart)


class RtrBlock(_Strict):
    tol: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=500, ge=1)
    delta0: float = Field(default=1.0, gt=0)
    delta_max: float = Field(default=1e3, gt=0)
    max_inner: int = Field(default=500, ge=1)
    warmup_tol: float | None = 1e-3
    relative: bool = False

    def build(self):
        return RtrConfig(tol=self.tol, max_iter=self.max_iter, delta0=self.delta0,
                         delta_max=self.delta_max, max_inner=self.max_inner,
                         warmup_tol=self.warmup_tol, relative=self.relative)


class RankAdaptiveBlock(_Strict):
    r0: int = Field(default=5, ge=1)
    r_up: int = Field(default=5, ge=1)
    tol: float = Field(default=1e-6, gt=0)
    eps: float = Field(default=1e-14, gt=0)
    relative: bool = True
    inner_solver: Literal["rcg", "rtr"] = "rcg"
    inner_rel: float = Field(default=0.1, gt=0)
    max_outer: int = Field(default=100, ge=1)

    def build(self, rcg: RcgBlock, rtr: RtrBlock):
        inner = rcg.build() if self.inner_solver == "rcg" else rtr.build()
        return RankAdaptiveConfig(r0=self.r0, r_up=self.r_up, tol=self.tol, eps=self.eps,
                                  relative=self.relative, solver=self.inner_solver, inner=inner,
                                  inner_rel=self.inner_rel, max_outer=self.max_outer)


class SolverBlock(_Strict):
    method: Literal["rcg", "rtr", "rank-adaptive"] = "rcg"
    rank: int = Field(default=16, ge=1)
    # seed of the random initial point; defaults to the problem seed
    init_seed: int | None = None
    # nonlinear problems: first solve the quadratic problem to this gradient norm
    warmup_linear_tol: float | None = Field(default=None, gt=0)
    rcg: RcgBlock = RcgBlock()
    rtr: RtrBlock = RtrBlock()
    rank_adaptive: RankAdaptiveBlock = RankAdaptiveBlock()
    # `solve` also computes the oracle snapshot and reports errors
    oracle: bool = False


class MetricBlock(_Strict):
    mode: Literal["preconditioned", "frobenius"] = "preconditioned"


class OutputBlock(_Strict):
    dir: str = "runs"
    prefix: str | None = None


class CompareMethod(_Strict):
    label: str
    solver: Literal["rcg", "rtr"]
    metric: Literal["preconditioned", "frobenius"] | None = None
    compression: Literal["exact", "compressed"] | None = None


class CompareBlock(_Strict):
    ranks: list[int] = Field(min_length=1)
    methods: list[CompareMethod] = Field(min_length=1)
    oracle: bool = True
    oracle_rtol: float = Field(default=1e-12, gt=0)


class SvdecayBlock(_Strict):
    fit_from: int = Field(default=4, ge=1)
    fit_to: int = Field(default=40, ge=2)
    oracle_rtol: float = Field(default=1e-12, gt=0)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    problem: ProblemBlock
    solver: SolverBlock = SolverBlock()
    metric: MetricBlock = MetricBlock()
    output: OutputBlock = OutputBlock()
    compare: CompareBlock | None = None
    svdecay: SvdecayBlock = SvdecayBlock()
    # large presets are refused unless the CLI is given --full-scale
    full_scale: bool = False

    @model_validator(mode="after")
    def _scale(self):
        m = self.problem.m
        if not self.full_scale and (m > DESK_MAX_M or self.problem.n > DESK_MAX_N):
            raise ValueError(
                f"m={m}, n={self.problem.n} exceeds desk scale; set full_scale: true"
            )
        return self

    def objective_config(self, metric: str | None = None, compression: str | None = None):
        c = self.problem.compression
        return ObjectiveConfig(nonlinearity=compression or c.mode, r_tilde=c.r_tilde,
                               ratio=c.ratio, metric=metric or self.metric.mode)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"problem": self.problem.model_copy(update={"seed": seed})})

    @property
    def init_seed(self):
        s = self.solver.init_seed
        return self.problem.seed if s is None else s


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return parse_config(data)
