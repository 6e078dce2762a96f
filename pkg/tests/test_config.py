from pathlib import Path

import pytest

from riemlowrank.config import load_config, parse_config
from riemlowrank.errors import ConfigError
from riemlowrank.optimizers import RankAdaptiveConfig, RcgConfig, RtrConfig

ROOT = Path(__file__).parent.parent / "configs"
CONFIGS = sorted(ROOT.rglob("*.yaml"))

BASE = {"name": "t", "problem": {"N": 7, "p": 3, "n": 16}}


def test_defaults():
    cfg = parse_config(BASE)
    assert cfg.problem.m == 49 and cfg.problem.seed == 1
    assert cfg.solver.method == "rcg" and cfg.metric.mode == "preconditioned"
    assert cfg.init_seed == 1 and not cfg.full_scale
    assert isinstance(cfg.solver.rcg.build(), RcgConfig)
    assert isinstance(cfg.solver.rtr.build(), RtrConfig)
    ra = cfg.solver.rank_adaptive.build(cfg.solver.rcg, cfg.solver.rtr)
    assert isinstance(ra, RankAdaptiveConfig) and ra.r0 == 5 and ra.r_up == 5


@pytest.mark.parametrize("patch", [
    {"problem": {"N": 7, "p": 1, "n": 16}},
    {"problem": {"N": 7, "p": 3, "n": 16, "bogus": 1}},
    {"solver": {"method": "newton"}},
    {"solver": {"rcg": {"tol": -1.0}}},
    {"extra_top_level": True},
    {"problem": {"N": 127, "p": 3, "n": 256}},
    {"problem": {"N": 15, "p": 3, "n": 5000}},
])
def test_invalid_configs_rejected(patch):
    with pytest.raises(ConfigError):
        parse_config({**BASE, **patch})


def test_full_scale_flag_allows_large_problems():
    cfg = parse_config({**BASE, "problem": {"N": 127, "p": 3, "n": 5000}, "full_scale": True})
    assert cfg.problem.m == 16129


def test_seed_override_and_objective_config():
    cfg = parse_config({**BASE, "problem": {**BASE["problem"], "nonlinear": True,
                                            "compression": {"mode": "compressed", "r_tilde": 3}}})
    assert cfg.with_seed(9).problem.seed == 9 and cfg.problem.seed == 1
    oc = cfg.objective_config()
    assert oc.nonlinearity == "compressed" and oc.r_tilde == 3
    assert cfg.objective_config("frobenius", "exact").metric == "frobenius"


def test_unreadable_file(tmp_path):
    (tmp_path / "bad.yaml").write_text("problem: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.relative_to(ROOT).as_posix())
def test_shipped_presets_validate(path):
    cfg = load_config(path)
    assert cfg.full_scale == ("full" in path.stem or "full" in path.parts[-2] or cfg.problem.m > 4000 or cfg.problem.n > 1024)


def test_presets_cover_every_table():
    names = {p.relative_to(ROOT).as_posix() for p in CONFIGS}
    assert sum(n.startswith("table1/") for n in names) == 4
    for t in ("table2", "table3", "table4"):
        assert any(n.startswith(f"{t}/desk/") for n in names)
        assert any(n.startswith(f"{t}/full/") for n in names)
