"""Shared fixtures.  Heavy solves are session-scoped and reused across
modules so the whole suite stays inside the desk-scale budget."""

import numpy as np
import pytest

from quitchain import recursion, simulate
from quitchain.config import RunConfig, baseline_config, multi_quit_config, quit_gain_config

# acceptance-scale grids: coarse enough to keep the suite fast, fine enough
# for every stated tolerance
BASE_SOLVER = dict(n_space=64, n_store=129, wide_n_space=128)


@pytest.fixture(scope="session")
def base_cfg():
    return baseline_config(**BASE_SOLVER)


@pytest.fixture(scope="session")
def base_env(base_cfg):
    return base_cfg.build_environment()


@pytest.fixture(scope="session")
def base_grid(base_cfg):
    return base_cfg.build_grid()


@pytest.fixture(scope="session")
def base_level01(base_env, base_grid):
    """(level-0 family, wides, level-1 family) on the baseline."""
    fam0, wides = recursion.solve_level0(base_env, base_grid)
    fam1 = recursion.iterate_level(fam0, base_env, base_grid)
    return fam0, wides, fam1


@pytest.fixture(scope="session")
def base_fixed_point(base_env, base_grid):
    return recursion.fixed_point(base_env, base_grid, tol=1e-4, n_max=50)


@pytest.fixture(scope="session")
def base_policies(base_env, base_fixed_point):
    family, _ = base_fixed_point
    return [simulate.extract_policy(s, base_env) for s in family.surfaces]


@pytest.fixture(scope="session")
def tiny_cost_cfg():
    doc = baseline_config(**BASE_SOLVER).doc
    doc["environment"]["c_agent"] = [[[0.0, 1e-4], [1.0, 1e-4]]]
    doc["environment"]["c_principal"] = [[0.0, 5e-5], [1.0, 5e-5]]
    return RunConfig(doc)


@pytest.fixture(scope="session")
def tiny_cost_level01(tiny_cost_cfg):
    """Level-0/1 families on the vanishing-cost market (the band pinches to
    width 1e-4 at expiry, exercising the analytic-layer extension)."""
    env = tiny_cost_cfg.build_environment()
    grid = tiny_cost_cfg.build_grid()
    fam0, _ = recursion.solve_level0(env, grid)
    fam1 = recursion.iterate_level(fam0, env, grid)
    return env, grid, fam0, fam1


@pytest.fixture(scope="session")
def quitgain_setup():
    """Example market-drop config with level-0/1 families."""
    cfg = quit_gain_config(c0_cap=1.0, drop_n=100.0, **BASE_SOLVER)
    env = cfg.build_environment()
    grid = cfg.build_grid()
    fam0, wides = recursion.solve_level0(env, grid)
    fam1 = recursion.iterate_level(fam0, env, grid)
    return cfg, env, grid, fam0, fam1


@pytest.fixture(scope="session")
def multiquit_setup():
    cfg = multi_quit_config(n_space=48, n_store=97, wide_n_space=96)
    env = cfg.build_environment()
    grid = cfg.build_grid()
    family, report = recursion.fixed_point(env, grid, tol=5e-4, n_max=40)
    policies = [simulate.extract_policy(s, env) for s in family.surfaces]
    return cfg, env, family, report, policies


def assert_rows_nonincreasing(surface, tol=1e-8):
    assert surface.row_monotone_defect() <= tol
