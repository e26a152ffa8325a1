"""Numerical toolkit for dynamic contracting with one-sided commitment.

Computes the principal's value functions over a chain of agents who may
quit at barrier hitting times, extracts the optimal feedback contracts,
and validates them by forward Monte Carlo simulation of contract chains.
"""

from .config import RunConfig, baseline_config, multi_quit_config, quit_gain_config
from .hjb import (
    ControlBounds,
    SolverGrid,
    ValueSurface,
    hamiltonian,
    hamiltonian_grid_max,
    solve_u0,
    solve_with_lower_boundary,
    terminal_layer_value,
)
from .market import (
    AgentTypeSet,
    Curve,
    MarketEnvironment,
    domain_contains,
    lower_barrier,
    upper_barrier,
    validate_environment,
)
from .recursion import (
    SurfaceFamily,
    compute_ubar,
    fixed_point,
    iterate_level,
    principal_value,
    principal_value_best,
    solve_level0,
)
from .simulate import (
    ChainRecord,
    ConstantContract,
    PolicyField,
    agent_value_backward,
    dpp_check,
    estimate_value,
    extract_policy,
    simulate_chain,
)

__version__ = "0.1.0"
