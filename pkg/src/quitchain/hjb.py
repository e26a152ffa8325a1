"""Monotone finite-difference solver for the principal's dynamic value on
one agent-type slice.

The state is the agent's continuation utility x, which under the tilted
measure drifts at lambda*exp(-lambda*eta) + theta*z^2/2 and diffuses at z.
The principal picks the payment rate eta <= C0 and the utility exposure z to
maximize expected flow theta*z - eta, so one backward time slice solves

    v <- v + dt * sup_{eta, z} [ z^2/2 * u_xx + drift * u_x + theta*z - eta ].

Solves run on a stretched grid s in [0, 1] whose edges track two moving
curves a(t) <= b(t):

* "band" solves: a = lower (quit) barrier with Dirichlet data g(t), used for
  the quit-aware values; the limit of the scheme selects the minimum solution
  compatible with the boundary inequality at the quit barrier.
* "halfline" solves: a = truncation depth x_min with the explicit
  constant-contract value as far-field data (an admissible-contract value,
  hence a guaranteed under-estimate, making the truncation bias one-sided).

The sup is taken over a fixed control grid, one menu per time step shared
by every node of the row: payment drifts d = lambda*e^{-lambda*eta}
log-spaced between the C0-drift and a depth-dependent cap, crossed with
z in [0, z_clip] (negative z is never optimal: the objective is even in z
apart from the +theta*z payoff).  Value-independent menus keep the discrete
operator provably monotone, and a shared menu keeps rows non-increasing in
x.  Upwinding uses the net grid-relative drift; the moving-grid velocity
enters through the chain rule.

The terminal payment singularity is closed by an analytic layer of width
eps_term where the surface equals the constant-contract (liquidation) value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ConfigurationError",
    "DomainError",
    "ControlBounds",
    "HamiltonianResult",
    "hamiltonian",
    "hamiltonian_grid_max",
    "SolverGrid",
    "ValueSurface",
    "terminal_layer_value",
    "monotone_row_update",
    "solve_u0",
    "solve_with_lower_boundary",
    "FLAG_ETA_FLOOR",
    "FLAG_Z_CLIPPED",
    "FLAG_Z_UNBOUNDED",
    "FLAG_FALLBACK",
]


class ConfigurationError(ValueError):
    """Grid or control parameters inconsistent with the scheme (e.g. CFL)."""


class DomainError(ValueError):
    """Evaluation requested outside the admissible domain."""


FLAG_ETA_FLOOR = 1      # payment-drift cap binding (eta at its lower clip)
FLAG_Z_CLIPPED = 2      # |z*| at the z clip with a proper interior optimum
FLAG_Z_UNBOUNDED = 4    # u_xx + theta*u_x >= 0: sup over z is unbounded
FLAG_FALLBACK = 8       # control-grid argmax fallback used

_FLAG_NAMES = {
    FLAG_ETA_FLOOR: "eta-clipped",
    FLAG_Z_CLIPPED: "z-clipped",
    FLAG_Z_UNBOUNDED: "z-unbounded",
    FLAG_FALLBACK: "fallback",
}


def flag_names(mask):
    return tuple(name for bit, name in sorted(_FLAG_NAMES.items()) if mask & bit)


# ---------------------------------------------------------------------------
# Hamiltonian: closed form and brute-force control-grid oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlBounds:
    """Clipped control box used by the closed form and the grid oracle."""

    c0: float
    eta_min: float
    z_max: float
    n_eta: int = 201
    n_z: int = 201

    def __post_init__(self):
        if self.eta_min >= self.c0:
            raise ConfigurationError("eta_min must lie below the payment cap")
        if self.z_max <= 0.0:
            raise ConfigurationError("z_max must be positive")

    @property
    def resolution(self):
        d_eta = (self.c0 - self.eta_min) / (self.n_eta - 1)
        d_z = 2.0 * self.z_max / (self.n_z - 1)
        return max(d_eta, d_z)


@dataclass
class HamiltonianResult:
    value: float
    eta_star: float
    z_star: float
    flags: int

    @property
    def flag_names(self):
        return flag_names(self.flags)


def _hamiltonian_objective(theta, lam, p, q, eta, z):
    drift = lam * np.exp(-lam * eta) + 0.5 * theta * z * z
    return 0.5 * z * z * q + drift * p + theta * z - eta


def hamiltonian(theta, lam, c0, p, q, bounds=None):
    """Pointwise supremum of the controlled generator at gradients (p, q).

    Nondegenerate case (q + theta*p < 0 and p < 0): the closed-form
    optimizers are z* = -theta/(q + theta*p) and
    eta* = [-(1/lam) * ln(-1/(lam^2 p))] ∧ C0.  Degenerate combinations are
    clipped to the control box and flagged rather than erroring:
    q + theta*p >= 0 makes the sup over z unbounded ("z-unbounded"), and
    p >= 0 pushes eta to its floor ("eta-clipped").
    """
    if bounds is None:
        bounds = ControlBounds(c0=c0, eta_min=c0 - 30.0 / lam, z_max=100.0)
    flags = 0

    a = q + theta * p
    if a < 0.0:
        z_star = -theta / a
        if z_star > bounds.z_max:
            z_star = bounds.z_max
            flags |= FLAG_Z_CLIPPED
    else:
        z_star = bounds.z_max
        flags |= FLAG_Z_UNBOUNDED

    if p < 0.0:
        eta_hat = -math.log(-1.0 / (lam * lam * p)) / lam
        if eta_hat >= c0:
            eta_star = c0
        elif eta_hat <= bounds.eta_min:
            eta_star = bounds.eta_min
            flags |= FLAG_ETA_FLOOR
        else:
            eta_star = eta_hat
    else:
        eta_star = bounds.eta_min
        flags |= FLAG_ETA_FLOOR

    value = _hamiltonian_objective(theta, lam, p, q, eta_star, z_star)
    return HamiltonianResult(float(value), float(eta_star), float(z_star), flags)


def hamiltonian_grid_max(theta, lam, c0, p, q, bounds):
    """Brute-force maximum over the discrete control grid (test oracle)."""
    etas = np.linspace(bounds.eta_min, c0, bounds.n_eta)
    zs = np.linspace(-bounds.z_max, bounds.z_max, bounds.n_z)
    vals = _hamiltonian_objective(theta, lam, p, q, etas[:, None], zs[None, :])
    k = int(np.argmax(vals))
    i, j = divmod(k, bounds.n_z)
    return float(vals[i, j]), float(etas[i]), float(zs[j])


# ---------------------------------------------------------------------------
# Grids and surfaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverGrid:
    """Discretization parameters shared by all slices of one run.

    n_time=None lets the CFL condition pick the smallest compliant step
    count (rounded up to a multiple of n_store-1 so stored rows are
    uniform in time).  An explicit n_time below the CFL minimum raises a
    ConfigurationError: the explicit scheme requires
    dt <= dx^2 / (z_clip^2 + dx * drift_max) at every node.
    """

    n_space: int = 96
    n_time: int | None = None
    n_store: int = 257
    wide_n_space: int = 256
    x_min_depth: float = 20.0
    z_rel: float = 2.0
    z_abs: float | None = None        # default 2.5 * theta_max, set per run
    nu_eta: float = 6.0               # payment-drift cap factor
    eps_eff: float | None = None      # cap time floor, default 0.075*T
    eps_term: float | None = None     # analytic layer width, default 2*dt
    eta_min: float | None = None      # fixed eta floor overriding the cap
    n_eta_ctrl: int = 20
    n_z_ctrl: int = 9
    cfl_safety: float = 0.90
    # analytic-layer extension floor: bands thinner than this fraction of
    # the t=0 width are closed analytically (a pinched band makes the
    # moving-grid advection arbitrarily stiff)
    w_floor_frac: float = 0.02

    def __post_init__(self):
        if self.n_space < 3:
            raise ConfigurationError("n_space must be at least 3")
        if self.n_time is not None and self.n_time < 2:
            raise ConfigurationError("n_time must be at least 2")
        if self.n_store < 3:
            raise ConfigurationError("n_store must be at least 3")
        if self.n_eta_ctrl < 2 or self.n_z_ctrl < 2:
            raise ConfigurationError("control grids need at least 2 points")
        if not (0.0 < self.cfl_safety <= 1.0):
            raise ConfigurationError("cfl_safety must be in (0, 1]")

    def refined(self, k=1):
        """Halve dx k times; n_time (if explicit) is multiplied by 4**k."""
        return replace(
            self,
            n_space=self.n_space * 2 ** k,
            wide_n_space=self.wide_n_space * 2 ** k,
            n_time=None if self.n_time is None else self.n_time * 4 ** k,
        )


class ValueSurface:
    """Grid values of one value-function slice on its moving domain.

    Rows are uniform stored times including 0 and T; columns are the
    stretched coordinate s in [0, 1] mapping to x = a(t) + s*(b(t)-a(t)).
    Column 0 carries the lower Dirichlet data actually used; the interior
    (columns >= 1) is the reported surface and no continuity across the
    lower edge is asserted.
    """

    def __init__(self, theta, times, s_nodes, lower_edge, upper_edge, values,
                 flags, boundary_lower, quit_index, kind, meta=None):
        self.theta = theta
        self.times = times
        self.s_nodes = s_nodes
        self.lower_edge = lower_edge
        self.upper_edge = upper_edge
        self.values = values
        self.flags = flags
        self.boundary_lower = boundary_lower
        self.quit_index = quit_index
        self.kind = kind
        self.meta = dict(meta or {})

    @property
    def n_rows(self):
        return self.times.size

    def x_nodes(self, i):
        return self.lower_edge[i] + self.s_nodes * (self.upper_edge[i] - self.lower_edge[i])

    def row_index(self, t):
        """Fractional row position of time t on the uniform stored grid."""
        dt = self.times[1] - self.times[0]
        return np.clip(np.asarray(t, dtype=float) / dt, 0.0, self.times.size - 1.0)

    def _interp_row(self, i, x):
        w = self.upper_edge[i] - self.lower_edge[i]
        s = np.clip((x - self.lower_edge[i]) / w, 0.0, 1.0)
        pos = s * (self.s_nodes.size - 1)
        j = np.minimum(pos.astype(int), self.s_nodes.size - 2)
        frac = pos - j
        row = self.values[i]
        return row[j] * (1.0 - frac) + row[j + 1] * frac

    def value_at(self, t, x):
        """Bilinear interpolation in (t, s)."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        pos = self.row_index(t)
        i = np.minimum(pos.astype(int), self.times.size - 2)
        frac = pos - i
        lo = self._interp_row_vec(i, x)
        hi = self._interp_row_vec(i + 1, x)
        out = lo * (1.0 - frac) + hi * frac
        return float(out) if out.ndim == 0 else out

    def _interp_row_vec(self, i, x):
        i = np.asarray(i)
        w = self.upper_edge[i] - self.lower_edge[i]
        s = np.clip((x - self.lower_edge[i]) / w, 0.0, 1.0)
        pos = s * (self.s_nodes.size - 1)
        j = np.minimum(pos.astype(int), self.s_nodes.size - 2)
        frac = pos - j
        if i.ndim == 0:
            row = self.values[int(i)]
            return row[j] * (1.0 - frac) + row[j + 1] * frac
        vals = self.values[i, j] * (1.0 - frac) + self.values[i, j + 1] * frac
        return vals

    def values_on_rows(self, x_per_row):
        """Interpolate row i at x_per_row[i] (no time interpolation)."""
        out = np.empty(self.n_rows)
        for i in range(self.n_rows):
            out[i] = self._interp_row(i, x_per_row[i])
        return out

    # -- invariants ---------------------------------------------------------

    def upper_boundary_defect(self, c0, T):
        target = -c0 * (T - self.times)
        return float(np.max(np.abs(self.values[:, -1] - target)))

    def terminal_row_max_abs(self):
        return float(np.max(np.abs(self.values[-1, 1:])))

    def row_monotone_defect(self):
        """Max increase along x over interior columns (>=1), all rows."""
        interior = self.values[:, 1:]
        return float(np.max(np.diff(interior, axis=1)))

    def clip_fractions(self):
        interior = self.flags[:, 1:-1]
        n = interior.size
        if n == 0:
            return {}
        return {
            "eta_floor": float(np.count_nonzero(interior & FLAG_ETA_FLOOR) / n),
            "z_clipped": float(np.count_nonzero(interior & FLAG_Z_CLIPPED) / n),
            "z_unbounded": float(np.count_nonzero(interior & FLAG_Z_UNBOUNDED) / n),
        }


# ---------------------------------------------------------------------------
# Terminal layer
# ---------------------------------------------------------------------------

def constant_contract_value(lam, T_minus_t, x):
    """Value of the deterministic liquidation contract from (t, x), x < 0.

    The contract pays eta = -(1/lam)*ln(-x/((T-t)*lam)) constantly with zero
    exposure, driving the agent's utility linearly to zero at T; its value
    ((T-t)/lam) * ln(-x / ((T-t)*lam)) under-estimates the true surface.
    """
    T_minus_t = np.asarray(T_minus_t, dtype=float)
    x = np.asarray(x, dtype=float)
    pos = T_minus_t > 0.0
    ratio = np.where(pos, -x / np.where(pos, T_minus_t * lam, 1.0), 1.0)
    return np.where(pos, T_minus_t / lam * np.log(ratio), 0.0)


def terminal_layer_value(theta, t, x, env):
    """Analytic value used to close the scheme on the last eps_term stretch."""
    if x >= 0.0:
        raise DomainError("terminal layer value needs x < 0")
    lam = env.lam(theta)
    return float(constant_contract_value(lam, env.horizon_T - t, x))


# ---------------------------------------------------------------------------
# The marching core
# ---------------------------------------------------------------------------

class _SliceGeometry:
    """Moving solve domain [a(t), b(t)] for one type."""

    def __init__(self, env, theta, kind, grid):
        self.env = env
        self.theta = theta
        self.kind = kind
        self.lam = env.lam(theta)
        T = env.horizon_T
        if kind == "band":
            self.x_min = None
        elif kind == "halfline":
            ub0 = env.upper_barrier(theta, 0.0)
            low = env.lower_barrier(theta, env.time_grid)
            deepest = float(np.min(low))
            self.x_min = min(-grid.x_min_depth * abs(ub0),
                             1.3 * deepest - 0.3 * max(1.0, abs(deepest)))
        else:
            raise ValueError(f"unknown slice kind {kind!r}")

    def a(self, t):
        if self.kind == "band":
            return self.env.lower_barrier(self.theta, t)
        return self.x_min * np.ones_like(np.asarray(t, dtype=float))

    def b(self, t):
        return self.env.upper_barrier(self.theta, t)

    def slope_bounds(self):
        """Conservative bounds on |a'| and |b'| for the CFL estimate."""
        i = self.env.theta_index(self.theta)
        b_slope = self.lam * math.exp(-self.lam * self.env.payment_cap_C0)
        if self.kind == "band":
            a_slope = (self.env.R_curves[i].max_abs_slope()
                       + self.env.c_curves[i].max_abs_slope())
        else:
            a_slope = 0.0
        return a_slope, b_slope


def _effective_z_abs(grid, env):
    if grid.z_abs is not None:
        return grid.z_abs
    return 2.5 * float(np.max(env.types.theta_values))


def _payment_cap(grid, lam, c0, T, t, a_t, width, eps_eff):
    """Per-step cap on the payment drift lambda*e^{-lambda*eta}.

    One scalar per time step (evaluated at the deepest node) so the control
    menu is identical across nodes; identical menus keep stored rows
    provably non-increasing in x.
    """
    d_min = lam * math.exp(-lam * c0)
    if grid.eta_min is not None:
        return max(lam * math.exp(-lam * grid.eta_min), d_min * (1.0 + 1e-9))
    depth = max(-a_t, 1e-3 * width)
    cap = grid.nu_eta * depth / max(T - t, eps_eff)
    return max(cap, d_min * (1.0 + 1e-9))


def _sup_kernel_numpy(d, eta, zdrift, znoise, payz, gamma, p_up, p_dn, q, out):
    """sup over the (payment drift, z) menu of the upwinded generator."""
    mu = d[:, None, None] + zdrift[None, :, None] - gamma[None, None, :]
    adv = np.where(mu >= 0.0, mu * p_up[None, None, :], mu * p_dn[None, None, :])
    zpart = znoise[:, None] * q[None, :] + payz[:, None]
    val = adv + zpart[None, :, :] - eta[:, None, None]
    np.max(val.reshape(-1, gamma.size), axis=0, out=out)
    return out


def monotone_row_update(v, dt, h, d, eta, zdrift, znoise, payz, gamma,
                        lower_value, upper_value):
    """One backward step of the discrete generator on a single row.

    v is the data row (later time); the returned row keeps the Dirichlet
    values at both edges and is projected onto x-non-increasing profiles.
    This is the scheme's whole per-step operator, exposed so the discrete
    comparison property (bumping any stencil value never lowers the update)
    can be tested directly.
    """
    p_up = (v[2:] - v[1:-1]) / h
    p_dn = (v[1:-1] - v[:-2]) / h
    q = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    H = _sup_kernel(d, eta, zdrift, znoise, payz, gamma, p_up, p_dn, q,
                    np.empty(v.size - 2))
    out = np.empty_like(v)
    out[1:-1] = v[1:-1] + dt * H
    out[0] = lower_value
    out[-1] = upper_value
    out[1:] = np.maximum.accumulate(out[:0:-1])[::-1]
    return out


try:  # pragma: no cover - exercised via the dispatch below
    import os as _os

    if _os.environ.get("QUITCHAIN_NO_NUMBA"):
        raise ImportError("numba disabled by environment")
    from numba import njit as _njit

    @_njit(cache=True)
    def _sup_kernel_numba(d, eta, zdrift, znoise, payz, gamma, p_up, p_dn, q, out):
        K = d.size
        M = zdrift.size
        n = gamma.size
        for j in range(n):
            pu = p_up[j]
            pd = p_dn[j]
            qq = q[j]
            g = gamma[j]
            best = -1e300
            for m in range(M):
                zc = znoise[m] * qq + payz[m]
                zd = zdrift[m]
                for k in range(K):
                    # same association as the numpy fallback: (d + zdrift) - gamma
                    mu = d[k] + zd - g
                    if mu >= 0.0:
                        v = mu * pu + zc - eta[k]
                    else:
                        v = mu * pd + zc - eta[k]
                    if v > best:
                        best = v
            out[j] = best
        return out

    _sup_kernel = _sup_kernel_numba
except ImportError:  # pragma: no cover
    _sup_kernel = _sup_kernel_numpy


def _march(env, theta, grid, geom, lower_data, quit_index):
    """Backward explicit march; returns a ValueSurface.

    lower_data: callable mapping an array of times to the Dirichlet values
    imposed on the lower edge a(t).
    """
    env.require_valid()
    lam = geom.lam
    theta = float(theta)
    T = env.horizon_T
    C0 = env.payment_cap_C0
    d_min = lam * math.exp(-lam * C0)
    n_space = grid.n_space if geom.kind == "band" else grid.wide_n_space
    n_store = grid.n_store
    eps_eff = grid.eps_eff if grid.eps_eff is not None else 0.075 * T
    z_abs = _effective_z_abs(grid, env)

    s_nodes = np.linspace(0.0, 1.0, n_space + 1)
    ds = 1.0 / n_space

    # width floor: extend the analytic layer over any terminal pinch of the band
    w0 = float(geom.b(0.0) - geom.a(0.0))
    if w0 <= 0.0:
        raise ConfigurationError("solve domain has non-positive width at t=0")
    w_floor = max(grid.w_floor_frac * w0, 1e-12)
    tt_probe = np.linspace(0.0, T, 2049)
    w_probe = geom.b(tt_probe) - geom.a(tt_probe)
    ok = w_probe >= w_floor
    if not ok[0]:
        raise ConfigurationError("solve domain is thinner than the width floor at t=0")
    # first probe index after which the width stays below the floor
    bad = np.nonzero(~ok)[0]
    pinch_eps = 0.0 if bad.size == 0 else T - tt_probe[bad[0] - 1]

    def zclip(width):
        return min(grid.z_rel * width, z_abs)

    def cfl_bound(eps_term_eff):
        a_slope, b_slope = geom.slope_bounds()
        gamma_max = a_slope + (a_slope + b_slope)  # |a'| + |W'|
        ts = np.linspace(0.0, max(T - eps_term_eff, 1e-12), 65)
        worst = 0.0
        for t in ts:
            w = float(geom.b(t) - geom.a(t))
            w = max(w, w_floor)
            h = ds * w
            zc = zclip(w)
            cap = _payment_cap(grid, lam, C0, T, t, float(geom.a(t)), w, eps_eff)
            mu_max = max(cap + 0.5 * theta * zc * zc + gamma_max,
                         gamma_max + d_min)
            worst = max(worst, zc * zc / (h * h) + mu_max / h)
        return worst

    # choose n_time (multiple of n_store-1, CFL-compliant)
    blocks = n_store - 1
    eps_term_guess = grid.eps_term if grid.eps_term is not None else 2.0 * T / 4096.0
    eps_term_guess = max(eps_term_guess, pinch_eps)
    need = cfl_bound(eps_term_guess)
    n_min = int(math.ceil(T * need / grid.cfl_safety))
    if grid.n_time is None:
        n_time = max(int(math.ceil(n_min / blocks)) * blocks, 2 * blocks)
    else:
        n_time = int(math.ceil(grid.n_time / blocks)) * blocks
        if n_time < n_min:
            raise ConfigurationError(
                f"n_time={grid.n_time} violates the CFL condition; "
                f"need at least {n_min} steps for this grid")
    dt = T / n_time
    eps_term_eff = max(grid.eps_term if grid.eps_term is not None else 2.0 * dt,
                       2.0 * dt, pinch_eps)

    times = np.linspace(0.0, T, n_time + 1)
    a_arr = geom.a(times)
    b_arr = geom.b(times)
    w_arr = np.maximum(b_arr - a_arr, w_floor)
    g_arr = lower_data(times)

    k_edge = int(np.searchsorted(times, T - eps_term_eff, side="left"))
    k_edge = min(max(k_edge, 1), n_time - 1)

    stride = n_time // blocks
    store_times = times[::stride]
    store_rows = np.empty((n_store, n_space + 1))
    store_flags = np.zeros((n_store, n_space + 1), dtype=np.uint8)

    s_int = s_nodes[1:-1]
    zg = np.linspace(0.0, 1.0, grid.n_z_ctrl)
    sfrac = np.linspace(0.0, 1.0, grid.n_eta_ctrl)

    log_dmin = math.log(d_min)

    def layer_row(k):
        # the true width, not the floored one: nodes must stay at or below
        # the upper barrier (x < 0) or the liquidation formula degenerates
        rem = T - times[k]
        x = a_arr[k] + s_nodes * (b_arr[k] - a_arr[k])
        if rem <= 0.0:
            row = np.zeros(n_space + 1)
        else:
            row = constant_contract_value(lam, rem, np.minimum(x, -1e-300))
        row[-1] = -C0 * rem
        return row

    log_lam = math.log(lam)

    def menu_at(k):
        """Control menu and geometry for the step landing on time index k.

        The grid-line velocity is taken over [t_{k-1}, t_k], exact for
        piecewise-linear barriers; the menu is shared by every node of the
        row (nested menus keep rows provably non-increasing in x).
        """
        w = w_arr[k]
        h = ds * w
        cap = _payment_cap(grid, lam, C0, T, times[k], a_arr[k], w, eps_eff)
        zc = zclip(w)
        z = zg * zc
        aprime = (a_arr[k] - a_arr[k - 1]) / dt
        wprime = (w_arr[k] - w_arr[k - 1]) / dt
        gamma = aprime + s_int * wprime

        ld = log_dmin + sfrac * (math.log(cap) - log_dmin)            # (K,)
        d = np.exp(ld)
        eta = (log_lam - ld) / lam
        zdrift = 0.5 * theta * z * z                                  # (M,)
        znoise = 0.5 * z * z
        payz = theta * z
        return d, eta, zdrift, znoise, payz, gamma, h, cap, z, zc

    def diag_at(k, v):
        """Argmax clip diagnostics of the discrete sup at row v, index k."""
        d, eta, zdrift, znoise, payz, gamma, h, cap, z, zc = menu_at(k)
        p_up = (v[2:] - v[1:-1]) / h
        p_dn = (v[1:-1] - v[:-2]) / h
        q = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
        mu = d[:, None, None] + zdrift[None, :, None] - gamma[None, None, :]
        adv = np.where(mu >= 0.0, mu * p_up[None, None, :], mu * p_dn[None, None, :])
        zpart = znoise[:, None] * q[None, :] + payz[:, None]
        val = adv + zpart[None, :, :] - eta[:, None, None]
        best = val.reshape(-1, gamma.size).argmax(axis=0)
        ki, mi = np.divmod(best, z.size)
        return {
            "d": d[ki], "cap": cap, "z": z[mi], "zc": zc,
            "a_coef": q + theta * p_up,
        }

    def flags_from_diag(diag):
        f = np.zeros(diag["d"].shape, dtype=np.uint8)
        f[diag["d"] >= diag["cap"] * (1.0 - 1e-9)] |= FLAG_ETA_FLOOR
        at_clip = diag["z"] >= diag["zc"] * (1.0 - 1e-9)
        f[at_clip & (diag["a_coef"] < 0.0)] |= FLAG_Z_CLIPPED
        f[at_clip & (diag["a_coef"] >= 0.0)] |= FLAG_Z_UNBOUNDED
        return f

    def maybe_store(k, v):
        if k % stride == 0:
            i = k // stride
            store_rows[i] = v
            if 0 < k < k_edge:
                store_flags[i, 1:-1] = flags_from_diag(diag_at(k, v))

    # initialize: layer rows
    v = layer_row(k_edge)
    for k in range(n_time, k_edge, -1):
        if k % stride == 0:
            store_rows[k // stride] = layer_row(k)
    maybe_store(k_edge, v)

    # backward march; monotone_row_update projects each row onto profiles
    # non-increasing in x (identity wherever the raw row already is, and a
    # running max of under-estimates of a decreasing function still
    # under-estimates it, so the one-sided truncation bias survives).
    for k in range(k_edge - 1, -1, -1):
        d, eta, zdrift, znoise, payz, gamma, h, _, _, _ = menu_at(k + 1)
        v = monotone_row_update(v, dt, h, d, eta, zdrift, znoise, payz,
                                gamma, g_arr[k], -C0 * (T - times[k]))
        maybe_store(k, v)

    lower_store = a_arr[::stride].copy()
    upper_store = b_arr[::stride].copy()
    g_store = g_arr[::stride].copy()

    surface = ValueSurface(
        theta=theta, times=store_times.copy(), s_nodes=s_nodes,
        lower_edge=lower_store, upper_edge=upper_store,
        values=store_rows, flags=store_flags, boundary_lower=g_store,
        quit_index=quit_index, kind=geom.kind,
        meta={
            "n_time": n_time, "n_space": n_space, "dt": dt, "ds": ds,
            "eps_term": eps_term_eff, "eps_eff": eps_eff,
            "z_abs": z_abs, "z_rel": grid.z_rel, "nu_eta": grid.nu_eta,
            "eta_min_cfg": grid.eta_min,
            "x_min": geom.x_min, "k_edge": k_edge,
            "n_eta_ctrl": grid.n_eta_ctrl, "n_z_ctrl": grid.n_z_ctrl,
        },
    )
    surface.meta["clip_fractions"] = surface.clip_fractions()
    return surface


def solve_u0(theta, env, grid):
    """No-quit value on the truncated half-line domain [x_min, upper barrier].

    Far-field Dirichlet data at x_min is the constant-contract value (the
    growth bound's left side): an admissible-contract value, so the
    truncation bias is one-sided.
    """
    env.require_valid()
    geom = _SliceGeometry(env, theta, "halfline", grid)
    lam = env.lam(theta)
    T = env.horizon_T

    def far_field(tt):
        return constant_contract_value(lam, T - np.asarray(tt, dtype=float),
                                       geom.x_min)

    return _march(env, theta, grid, geom, far_field, quit_index=0)


def solve_with_lower_boundary(theta, g_times, g_values, env, grid,
                              quit_index=1):
    """Quit-aware value on the moving band with Dirichlet data g at the
    lower (quit) barrier, -C0*(T-t) at the upper barrier and 0 at T.

    The monotone scheme lets the discrete solution detach from g wherever
    quitting is unattractive, selecting the minimum solution compatible
    with the boundary inequality at the quit barrier.
    """
    env.require_valid()
    g_times = np.asarray(g_times, dtype=float)
    g_values = np.asarray(g_values, dtype=float)
    if g_times.shape != g_values.shape or g_times.ndim != 1:
        raise ValueError("boundary curve needs matching 1-d time/value arrays")
    if not np.all(np.isfinite(g_values)):
        raise ValueError("boundary curve must be finite")
    geom = _SliceGeometry(env, theta, "band", grid)

    def lower(tt):
        return np.interp(np.asarray(tt, dtype=float), g_times, g_values)

    return _march(env, theta, grid, geom, lower, quit_index=quit_index)
