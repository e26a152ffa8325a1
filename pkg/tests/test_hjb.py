import math

import numpy as np
import pytest

from quitchain import recursion
from quitchain.hjb import (
    ConfigurationError,
    DomainError,
    SolverGrid,
    monotone_row_update,
    solve_with_lower_boundary,
    terminal_layer_value,
)


def test_terminal_layer_values(base_env):
    assert terminal_layer_value(1.0, 0.99, -0.01, base_env) == pytest.approx(0.0, abs=1e-15)
    assert terminal_layer_value(1.0, 0.99, -0.01 * math.e, base_env) == pytest.approx(0.01, abs=1e-15)


def test_terminal_layer_value_lam2():
    from test_market import make_env

    env = make_env(lam=2.0, T=1.0)
    got = terminal_layer_value(1.0, 0.98, -0.08, env)
    assert got == pytest.approx(0.01 * math.log(2.0), abs=1e-15)


def test_terminal_layer_domain_error(base_env):
    with pytest.raises(DomainError):
        terminal_layer_value(1.0, 0.995, 0.0, base_env)
    with pytest.raises(DomainError):
        terminal_layer_value(1.0, 0.995, 0.3, base_env)


def test_u0_upper_boundary_exact(base_env, base_level01):
    _, wides, _ = base_level01
    wide = wides[1.0]
    T, C0 = base_env.horizon_T, base_env.payment_cap_C0
    assert wide.upper_boundary_defect(C0, T) == 0.0
    # mid-horizon sample
    assert wide.value_at(0.5, base_env.upper_barrier(1.0, 0.5)) == pytest.approx(-0.5, abs=1e-12)


def test_u0_terminal_row_zero(base_level01):
    _, wides, _ = base_level01
    assert wides[1.0].terminal_row_max_abs() == 0.0


def test_u0_face_lift_near_terminal(base_level01):
    _, wides, _ = base_level01
    wide = wides[1.0]
    vals = [abs(wide.value_at(t, -0.1)) for t in (0.96, 0.98, 0.99)]
    assert vals[-1] <= 0.05
    assert vals[2] <= vals[0] + 1e-12


def test_u0_growth_lower_bound_at_unit_depth(base_level01):
    _, wides, _ = base_level01
    # at (t=0, x=-1) the liquidation bound is (T/lam)*ln(-x/(T*lam)) =
    # ln(1) = 0, so the surface must be nonnegative there
    assert wides[1.0].value_at(0.0, -1.0) >= 0.0 - 1e-6


def test_far_field_row_is_constant_contract_value(base_env, base_level01):
    _, wides, _ = base_level01
    wide = wides[1.0]
    x_min = wide.meta["x_min"]
    lam = base_env.lam(1.0)
    T = base_env.horizon_T
    for i in (0, wide.n_rows // 2):
        t = wide.times[i]
        expect = (T - t) / lam * math.log(-x_min / ((T - t) * lam))
        assert wide.values[i, 0] == pytest.approx(expect, abs=1e-12)


def test_band_boundary_rows(base_env, base_fixed_point):
    family, _ = base_fixed_point
    surf = family.surfaces[0]
    T, C0 = base_env.horizon_T, base_env.payment_cap_C0
    assert surf.upper_boundary_defect(C0, T) == 0.0
    assert surf.value_at(0.25, base_env.upper_barrier(1.0, 0.25)) == pytest.approx(-0.75, abs=1e-12)
    assert surf.terminal_row_max_abs() == 0.0


def test_row_monotonicity_all_surfaces(base_level01, base_fixed_point):
    fam0, wides, fam1 = base_level01
    family, _ = base_fixed_point
    for surf in [*fam0.surfaces, *fam1.surfaces, *family.surfaces, wides[1.0]]:
        assert surf.row_monotone_defect() <= 1e-8


def test_repulsive_boundary_reproduces_no_quit_value(base_env, base_grid, base_level01):
    """Catastrophically penalized quitting (g = -1e6) detaches from the
    boundary and reproduces the restricted no-quit solve away from the
    barrier (near the barrier the two problems genuinely differ: avoiding a
    -1e6 boundary forfeits exposure there).  Checked at two resolutions."""
    fam0, _, _ = base_level01
    g_t = fam0.surfaces[0].times
    deep = solve_with_lower_boundary(1.0, g_t, np.full(g_t.size, -1e6),
                                     base_env, base_grid)
    base_vals = fam0.surfaces[0].values
    n = base_grid.n_space
    assert np.max(np.abs(deep.values[:, n // 2:] - base_vals[:, n // 2:])) <= 5e-3
    assert np.max(np.abs(deep.values[:, 3 * n // 4:] - base_vals[:, 3 * n // 4:])) <= 1e-6

    fine_grid = SolverGrid(n_space=128, n_store=129, wide_n_space=256)
    fam0f, _ = recursion.solve_level0(base_env, fine_grid)
    g_tf = fam0f.surfaces[0].times
    deep_f = solve_with_lower_boundary(1.0, g_tf, np.full(g_tf.size, -1e6),
                                       base_env, fine_grid)
    nf = fine_grid.n_space
    diff_mid = np.max(np.abs(deep_f.values[:, nf // 2:]
                             - fam0f.surfaces[0].values[:, nf // 2:]))
    assert diff_mid <= 5e-3


def test_discrete_comparison_in_boundary_data(base_env, base_grid):
    """g1 <= g2 pointwise implies the solved surfaces are ordered."""
    ts = np.linspace(0.0, 1.0, 65)
    g2 = -0.3 + 0.1 * np.sin(3.0 * ts)
    g1 = g2 - 0.25
    s1 = solve_with_lower_boundary(1.0, ts, g1, base_env, base_grid)
    s2 = solve_with_lower_boundary(1.0, ts, g2, base_env, base_grid)
    assert np.max(s1.values - s2.values) <= 1e-12


def test_operator_monotone_under_perturbation():
    """Bumping any stencil value never lowers the updated node value, and
    bumping the node itself never lowers it by more than the bump (CFL)."""
    rng = np.random.default_rng(11)
    n = 24
    h = 0.01
    dt = 2.0e-6
    for trial in range(40):
        v = np.sort(rng.normal(0.0, 1.0, n))[::-1].copy()  # decreasing row
        d = np.exp(np.linspace(math.log(0.3), math.log(30.0), 12))
        eta = -np.log(d) / 1.0
        z = np.linspace(0.0, 1.5, 7)
        zdrift = 0.5 * z * z
        znoise = 0.5 * z * z
        payz = z
        gamma = rng.normal(0.0, 1.0, n - 2)
        base = monotone_row_update(v, dt, h, d, eta, zdrift, znoise, payz,
                                   gamma, v[0], v[-1])
        j = int(rng.integers(0, n))
        bump = 10.0 ** rng.uniform(-6, -1)
        v2 = v.copy()
        v2[j] += bump
        pert = monotone_row_update(v2, dt, h, d, eta, zdrift, znoise, payz,
                                   gamma, v2[0], v2[-1])
        assert np.min(pert - base) >= -1e-12
        assert np.max(pert - base) <= bump + 1e-12


def test_update_preserves_row_monotonicity():
    rng = np.random.default_rng(3)
    n = 30
    for _ in range(25):
        v = np.sort(rng.normal(0.0, 1.0, n))[::-1].copy()
        d = np.exp(np.linspace(math.log(0.37), math.log(12.0), 10))
        eta = -np.log(d)
        z = np.linspace(0.0, 0.8, 5)
        out = monotone_row_update(v, 1e-5, 0.02, d, eta, 0.5 * z * z,
                                  0.5 * z * z, z, rng.normal(0, 2, n - 2),
                                  v[0], v[-1])
        assert np.max(np.diff(out[1:])) <= 0.0


def test_cfl_violation_raises(base_env):
    grid = SolverGrid(n_space=64, n_time=256, n_store=129)
    with pytest.raises(ConfigurationError):
        solve_with_lower_boundary(1.0, np.array([0.0, 1.0]),
                                  np.array([-0.3, -0.05]), base_env, grid)


def test_bad_boundary_curve_rejected(base_env, base_grid):
    with pytest.raises(ValueError):
        solve_with_lower_boundary(1.0, np.array([0.0, 1.0]),
                                  np.array([np.nan, 0.0]), base_env, base_grid)


def test_solver_grid_validation():
    with pytest.raises(ConfigurationError):
        SolverGrid(n_space=2)
    with pytest.raises(ConfigurationError):
        SolverGrid(n_time=1)
    g = SolverGrid(n_space=16)
    g2 = g.refined(1)
    assert g2.n_space == 32 and g2.wide_n_space == 2 * g.wide_n_space


def test_surface_bilinear_interp_consistency(base_fixed_point):
    family, _ = base_fixed_point
    surf = family.surfaces[0]
    i = surf.n_rows // 3
    x = surf.x_nodes(i)
    # node-exact queries reproduce stored values
    got = surf.value_at(surf.times[i], x[5])
    assert got == pytest.approx(surf.values[i, 5], abs=1e-12)


def test_clip_fraction_reporting(base_level01):
    _, wides, _ = base_level01
    clip = wides[1.0].meta["clip_fractions"]
    assert set(clip) == {"eta_floor", "z_clipped", "z_unbounded"}
    assert all(0.0 <= v <= 1.0 for v in clip.values())


def test_numpy_fallback_bitwise_matches_numba():
    """The pure-numpy kernel and the jitted kernel produce identical bytes
    (same expression structure, same IEEE operation order)."""
    import subprocess
    import sys

    snippet = (
        "import hashlib, numpy as np\n"
        "from quitchain.config import baseline_config\n"
        "from quitchain import recursion\n"
        "cfg = baseline_config(n_space=24, n_store=17, wide_n_space=32)\n"
        "env = cfg.build_environment(); grid = cfg.build_grid()\n"
        "fam, _ = recursion.solve_level0(env, grid)\n"
        "print(hashlib.sha256(fam.surfaces[0].values.tobytes()).hexdigest())\n"
    )
    import os

    outs = []
    for disable in ("", "1"):
        full_env = dict(os.environ)
        full_env.pop("QUITCHAIN_NO_NUMBA", None)
        if disable:
            full_env["QUITCHAIN_NO_NUMBA"] = disable
        res = subprocess.run([sys.executable, "-c", snippet],
                             capture_output=True, text=True, env=full_env,
                             check=True)
        outs.append(res.stdout.strip())
    assert outs[0] == outs[1]


def test_pinched_band_layer_rows_stay_clean(tiny_cost_level01):
    """A band whose width collapses at expiry is closed analytically; the
    layer rows must stay on the true (pinched) domain and non-increasing."""
    _, _, fam0, fam1 = tiny_cost_level01
    for fam in (fam0, fam1):
        surf = fam.surfaces[0]
        assert surf.row_monotone_defect() <= 1e-8
        assert surf.values.min() >= -1.0 - 1e-9
        # layer extension recorded and wider than the bare two-step default
        assert surf.meta["eps_term"] > 4.0 * surf.meta["dt"]
