"""Quit-budget recursion and the unlimited-quitting fixed point.

Level n solves, for every type, the band problem whose lower Dirichlet data
is the coupling curve of level n-1,

    ubar_{n-1}(t) = max over theta of u_{n-1}(theta; t, R_theta(t)) - cP(t),

the value of firing up a fresh contract with the best replacement hire at
time t.  Level 0 is the no-quit value solved on the truncated half line and
restricted to the band via a matched re-solve with Dirichlet data read off
the wide surface (the same equation with its own boundary values, so the
restriction reproduces the wide solution inside the band on a grid that is
directly comparable across levels).

Convergence is measured on the coupling curve only: it is the one channel
through which the type slices interact.  The level values need not be
monotone in n; only the sup-norm Cauchy behaviour of the curve is asserted,
with the delta sequence fitted to a/n^b and flagged when b is consistent
with the 1/n quit-frequency bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hjb import solve_u0, solve_with_lower_boundary

__all__ = [
    "SurfaceFamily",
    "ConvergenceReport",
    "InternalConsistencyError",
    "compute_ubar",
    "solve_level0",
    "iterate_level",
    "fixed_point",
    "principal_value",
    "principal_value_best",
]


class InternalConsistencyError(RuntimeError):
    """IR curve left the solved domain; cannot happen after validation."""


class SurfaceFamily:
    """Per-type value surfaces of one quit-budget level plus the coupling curve."""

    def __init__(self, thetas, surfaces, level_n, env, infinity_proxy=False):
        self.thetas = list(thetas)
        self.surfaces = list(surfaces)
        self.level_n = level_n
        self.infinity_proxy = infinity_proxy
        times, values, argmax_idx = compute_ubar(self, env)
        self.ubar_times = times
        self.ubar_values = values
        self.argmax_idx = argmax_idx

    def slice_for(self, theta):
        for th, surf in zip(self.thetas, self.surfaces):
            if th == theta:
                return surf
        raise KeyError(f"no surface for type {theta!r}")

    def ubar_at(self, t):
        return np.interp(t, self.ubar_times, self.ubar_values)

    def value_at(self, theta, t, x):
        return self.slice_for(theta).value_at(t, x)

    def slice_values_at(self, t, env):
        """Stack of u(theta; t, R_theta(t)) over types; t may be an array."""
        t = np.asarray(t, dtype=float)
        rows = [surf.value_at(t, env.R(th, t))
                for th, surf in zip(self.thetas, self.surfaces)]
        return np.vstack([np.atleast_1d(r) for r in rows])


@dataclass
class ConvergenceReport:
    deltas: list
    iterations: int
    tol: float
    converged: bool
    fitted_a: float | None
    fitted_b: float | None
    cn_consistent: bool
    c_hat: float | None
    grid_meta: dict = field(default_factory=dict)

    @property
    def flag(self):
        return "converged" if self.converged else "not converged"

    def as_dict(self):
        return {
            "deltas": list(map(float, self.deltas)),
            "iterations": self.iterations,
            "tol": self.tol,
            "flag": self.flag,
            "fitted_a": self.fitted_a,
            "fitted_b": self.fitted_b,
            "cn_consistent": self.cn_consistent,
            "c_hat": self.c_hat,
            "grid": self.grid_meta,
        }


def compute_ubar(family, env):
    """Coupling curve on the family's stored time grid.

    For each stored time, interpolate every slice at x = R_theta(t), take
    the max over types (ties to the smallest type), subtract the principal's
    quit cost; the terminal value is pinned to -cP(T) exactly.
    """
    base = family.surfaces[0]
    times = base.times
    for surf in family.surfaces[1:]:
        if surf.times.shape != times.shape or not np.allclose(surf.times, times):
            raise InternalConsistencyError("family slices use different stored grids")

    stack = np.empty((len(family.thetas), times.size))
    for i, (theta, surf) in enumerate(zip(family.thetas, family.surfaces)):
        r = env.R(theta, times)
        low = surf.lower_edge
        up = surf.upper_edge
        inside = (r >= low - 1e-9) & (r <= up + 1e-9)
        if not np.all(inside[:-1]):
            bad = int(np.nonzero(~inside[:-1])[0][0])
            raise InternalConsistencyError(
                f"IR curve leaves the solved domain for type {theta} "
                f"at t={times[bad]:.6g}")
        stack[i] = surf.values_on_rows(r)

    argmax_idx = np.argmax(stack, axis=0)  # first max wins: smallest theta
    values = stack[argmax_idx, np.arange(times.size)] - env.cP(times)
    values[-1] = -float(env.cP(env.horizon_T))
    return times.copy(), values, argmax_idx


def solve_level0(env, grid):
    """Level-0 family: no-quit value restricted to the moving band.

    Returns (family, wide) where wide maps each type to its half-line
    surface (kept for growth-bound checks and reporting).
    """
    env.require_valid()
    wides = {}
    surfaces = []
    thetas = [float(t) for t in env.types.theta_values]
    for theta in thetas:
        wide = solve_u0(theta, env, grid)
        wides[theta] = wide
        g_times = wide.times
        g_values = wide.values_on_rows(env.lower_barrier(theta, g_times))
        surf = solve_with_lower_boundary(theta, g_times, g_values, env, grid,
                                         quit_index=0)
        surfaces.append(surf)
    family = SurfaceFamily(thetas, surfaces, level_n=0, env=env)
    return family, wides


def iterate_level(prev, env, grid):
    """One recursion step: re-solve every slice against prev's coupling curve."""
    env.require_valid()
    surfaces = []
    for theta in prev.thetas:
        surf = solve_with_lower_boundary(
            theta, prev.ubar_times, prev.ubar_values, env, grid,
            quit_index=prev.level_n + 1)
        surfaces.append(surf)
    return SurfaceFamily(prev.thetas, surfaces, prev.level_n + 1, env)


def _fit_decay(deltas):
    """Least-squares fit of delta_n ~ a / n^b over the positive deltas."""
    n = np.arange(1, len(deltas) + 1, dtype=float)
    d = np.asarray(deltas, dtype=float)
    keep = d > 0.0
    if np.count_nonzero(keep) < 2:
        return None, None
    ln_n = np.log(n[keep])
    ln_d = np.log(d[keep])
    slope, intercept = np.polyfit(ln_n, ln_d, 1)
    return float(np.exp(intercept)), float(-slope)


def fixed_point(env, grid, tol, n_max):
    """Iterate levels until the coupling curve moves by at most tol in sup norm.

    Returns the last family (the unlimited-quitting proxy when converged)
    and a ConvergenceReport; hitting n_max without meeting tol is reported,
    not raised.
    """
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    env.require_valid()

    family, wides = solve_level0(env, grid)
    deltas = []
    converged = False
    for _ in range(n_max):
        nxt = iterate_level(family, env, grid)
        delta = float(np.max(np.abs(nxt.ubar_values - family.ubar_values)))
        deltas.append(delta)
        family = nxt
        if delta <= tol:
            converged = True
            break

    family.infinity_proxy = converged
    fitted_a, fitted_b = _fit_decay(deltas)
    cn_consistent = len(deltas) < 3 or (fitted_b is not None and fitted_b >= 0.99)
    c_hat = max((d * (i + 1) for i, d in enumerate(deltas)), default=None)
    base = family.surfaces[0]
    report = ConvergenceReport(
        deltas=deltas, iterations=len(deltas), tol=float(tol),
        converged=converged, fitted_a=fitted_a, fitted_b=fitted_b,
        cn_consistent=cn_consistent, c_hat=c_hat,
        grid_meta={
            "n_space": base.meta.get("n_space"),
            "n_time": base.meta.get("n_time"),
            "clip_fractions": {str(th): s.meta.get("clip_fractions")
                               for th, s in zip(family.thetas, family.surfaces)},
        },
    )
    report.grid_meta["wides"] = {str(th): w.meta.get("clip_fractions")
                                 for th, w in wides.items()}
    family.wides = wides
    return family, report


def principal_value(family, theta, t, env):
    """Interpolated family value at (theta, t, R_theta(t))."""
    return float(family.value_at(theta, t, env.R(theta, t)))


def principal_value_best(family, t, env):
    """Best-type value max_theta u(theta; t, R_theta(t)) and its argmax."""
    vals = [principal_value(family, th, t, env) for th in family.thetas]
    i = int(np.argmax(vals))
    return vals[i], family.thetas[i]
