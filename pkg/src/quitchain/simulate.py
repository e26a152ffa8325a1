"""Feedback-policy extraction, forward chain simulation, and agent-side checks.

Everything here runs directly under the tilted measure: the state increment
uses drift lambda*e^{-lambda*eta} + theta*z^2/2 and the payoff integrand is
theta*z - eta, so no likelihood-ratio weighting is ever applied.

A chain starts with one agent; when the continuation utility X crosses the
quit barrier the principal pays cP, hires the best replacement type (argmax
of the family value at the restart state, ties to the smallest type) and X
restarts on the new type's IR curve.  Quit times use the intra-step linear
crossing (smallest-hitting-time convention): no Brownian-bridge correction,
the bias is O(sqrt(dt)) and refinement-tested.  Inside the terminal layer
the contract switches to the deterministic liquidation payment with z = 0,
which drives X to zero exactly at T.

Reproducibility: path i draws from its own counter-based stream keyed by
(seed, i), so results are bit-identical for any worker count or chunking.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .hjb import (
    FLAG_ETA_FLOOR,
    FLAG_FALLBACK,
    FLAG_Z_CLIPPED,
    FLAG_Z_UNBOUNDED,
    ConfigurationError,
    DomainError,
    _payment_cap,
)

__all__ = [
    "PolicyField",
    "ChainRecord",
    "ValueEstimate",
    "DppResult",
    "ConstantContract",
    "AdmissibilityError",
    "extract_policy",
    "simulate_chain",
    "estimate_value",
    "agent_value_backward",
    "dpp_check",
]


class AdmissibilityError(ValueError):
    """Contract violates the admissible-payment bounds."""


@dataclass(frozen=True)
class ConstantContract:
    """Fixed (eta, z) override used for oracle simulations."""

    eta: float
    z: float


class PolicyField:
    """Feedback controls on the same stored grid as a ValueSurface."""

    def __init__(self, theta, times, s_nodes, lower_edge, upper_edge,
                 eta, z, flags, z_bound, meta=None):
        self.theta = theta
        self.times = times
        self.s_nodes = s_nodes
        self.lower_edge = lower_edge
        self.upper_edge = upper_edge
        self.eta = eta
        self.z = z
        self.flags = flags
        self.z_bound = z_bound
        self.meta = dict(meta or {})

    def _row_controls(self, i, x):
        w = self.upper_edge[i] - self.lower_edge[i]
        s = np.clip((x - self.lower_edge[i]) / w, 0.0, 1.0)
        pos = s * (self.s_nodes.size - 1)
        j = np.minimum(pos.astype(int), self.s_nodes.size - 2)
        frac = pos - j
        eta = self.eta[i, j] * (1.0 - frac) + self.eta[i, j + 1] * frac
        z = self.z[i, j] * (1.0 - frac) + self.z[i, j + 1] * frac
        return eta, z

    def at(self, t, x):
        """Bilinear controls at scalar time t, vectorized over states x."""
        dt = self.times[1] - self.times[0]
        pos = min(max(t / dt, 0.0), self.times.size - 1.0)
        i = min(int(pos), self.times.size - 2)
        frac = pos - i
        e0, z0 = self._row_controls(i, x)
        e1, z1 = self._row_controls(i + 1, x)
        return e0 * (1.0 - frac) + e1 * frac, z0 * (1.0 - frac) + z1 * frac


def extract_policy(surface, env):
    """Feedback controls from a solved surface via central differences.

    z* = -theta/(q + theta*p) and eta* = [-(1/lam) ln(-1/(lam^2 p))] ∧ C0
    wherever q + theta*p < 0 and p < 0; elsewhere the control-grid argmax
    of the generator is used and the node is flagged.
    """
    theta = surface.theta
    lam = env.lam(theta)
    C0 = env.payment_cap_C0
    T = env.horizon_T
    z_rel = surface.meta.get("z_rel", 2.0)
    z_abs = surface.meta.get("z_abs", 2.5 * theta)
    eps_eff = surface.meta.get("eps_eff", 0.075 * T)
    nu = surface.meta.get("nu_eta", 6.0)

    m, ncol = surface.values.shape
    eta = np.empty((m, ncol))
    zst = np.empty((m, ncol))
    flags = np.zeros((m, ncol), dtype=np.uint8)
    ds = surface.s_nodes[1] - surface.s_nodes[0]

    # same payment-drift cap the solver used for this surface
    cap_params = SimpleNamespace(eta_min=surface.meta.get("eta_min_cfg"),
                                 nu_eta=nu)
    z_bound = 0.0
    for i in range(m):
        t = surface.times[i]
        w = surface.upper_edge[i] - surface.lower_edge[i]
        w = max(w, 1e-12)
        h = ds * w
        v = surface.values[i]
        p = (v[2:] - v[:-2]) / (2.0 * h)
        q = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
        cap = _payment_cap(cap_params, lam, C0, T, t,
                           surface.lower_edge[i], w, eps_eff)
        eta_floor = -math.log(cap / lam) / lam
        zcl = min(z_rel * w, z_abs)
        z_bound = max(z_bound, zcl)

        a_coef = q + theta * p
        good = (a_coef < 0.0) & (p < 0.0)
        z_row = np.where(a_coef < 0.0, -theta / np.where(a_coef < 0.0, a_coef, -1.0), zcl)
        f_row = np.zeros(p.shape, dtype=np.uint8)
        f_row[(a_coef < 0.0) & (z_row > zcl)] |= FLAG_Z_CLIPPED
        f_row[a_coef >= 0.0] |= FLAG_Z_UNBOUNDED
        z_row = np.clip(z_row, 0.0, zcl)

        with np.errstate(divide="ignore", invalid="ignore"):
            eta_hat = -np.log(-1.0 / (lam * lam * np.where(p < 0.0, p, -1.0))) / lam
        eta_row = np.where(p < 0.0, np.minimum(eta_hat, C0), eta_floor)
        f_row[p >= 0.0] |= FLAG_ETA_FLOOR
        f_row[(p < 0.0) & (eta_hat < eta_floor)] |= FLAG_ETA_FLOOR
        eta_row = np.clip(eta_row, eta_floor, C0)

        bad = np.nonzero(~good)[0]
        if bad.size:
            eg = np.linspace(eta_floor, C0, 65)
            zg = np.linspace(0.0, zcl, 33)
            drift = lam * np.exp(-lam * eg)[:, None] + 0.5 * theta * zg[None, :] ** 2
            for j in bad:
                obj = (0.5 * zg[None, :] ** 2 * q[j] + drift * p[j]
                       + theta * zg[None, :] - eg[:, None])
                k = int(np.argmax(obj))
                ke, kz = divmod(k, zg.size)
                eta_row[j] = eg[ke]
                z_row[j] = zg[kz]
                f_row[j] |= FLAG_FALLBACK

        eta[i, 1:-1] = eta_row
        zst[i, 1:-1] = z_row
        flags[i, 1:-1] = f_row
        eta[i, 0] = eta_row[0]
        zst[i, 0] = z_row[0]
        eta[i, -1] = C0
        zst[i, -1] = 0.0

    return PolicyField(
        theta=theta, times=surface.times, s_nodes=surface.s_nodes,
        lower_edge=surface.lower_edge, upper_edge=surface.upper_edge,
        eta=eta, z=zst, flags=flags, z_bound=z_bound,
        meta={"eps_term": surface.meta.get("eps_term"),
              "quit_index": surface.quit_index},
    )


@dataclass
class ChainRecord:
    seed: int
    path_index: int
    start: tuple
    quit_times: list
    hired_types: list
    path_times: np.ndarray
    utility_path: np.ndarray
    payoff: float
    quit_count: int
    terminal_gap: float


@dataclass
class ValueEstimate:
    mean: float
    stderr: float
    quit_count_hist: np.ndarray
    mean_terminal_gap: float
    n_paths: int
    mean_quit_count: float
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "quit_count_hist": [int(c) for c in self.quit_count_hist],
            "mean_terminal_gap": self.mean_terminal_gap,
            "n_paths": self.n_paths,
            "mean_quit_count": self.mean_quit_count,
        }


@dataclass
class DppResult:
    residual: float
    estimate: float
    stderr: float
    reference: float
    n_paths: int

    def as_dict(self):
        return {
            "residual": self.residual,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "reference": self.reference,
            "n_paths": self.n_paths,
        }


def _path_normals(seed, path_index, steps):
    bitgen = np.random.Philox(key=np.array([seed, path_index], dtype=np.uint64))
    return np.random.Generator(bitgen).standard_normal(steps)


def _sim_block(env, family, policies, start, steps, seed, lo, hi,
               override, stop_at_first_quit, record_path, eps_sim,
               record_stride=1, collect_events=False):
    """Simulate paths [lo, hi); returns per-path summaries (and one path)."""
    theta0, t0, x0 = start
    T = env.horizon_T
    thetas = family.thetas
    n_types = len(thetas)
    ds_step = (T - t0) / steps
    sqdt = math.sqrt(ds_step)

    P = hi - lo
    X = np.full(P, float(x0))
    type_idx = np.full(P, family.thetas.index(float(theta0)), dtype=int)
    payoff = np.zeros(P)
    quit_count = np.zeros(P, dtype=int)
    first_quit = np.full(P, T)
    frozen = np.zeros(P, dtype=bool)
    # once the utility touches the upper barrier the only admissible
    # continuation is the capped ride (eta = C0, z = 0) to expiry; the lock
    # keeps the simulated class identical to the one the solver prices (a
    # clamp that keeps diffusing would be a reflecting barrier, i.e. free
    # disposal of promised utility)
    riding = np.zeros(P, dtype=bool)

    eps = np.empty((P, steps))
    for i in range(P):
        eps[i] = _path_normals(seed, lo + i, steps)

    lam_by = [env.lam(th) for th in thetas]

    rec_times, rec_vals, rec_quits, rec_hires = [], [], [], []
    events_path, events_tau = [], []
    if record_path:
        rec_times.append(t0)
        rec_vals.append(float(X[0]))

    for k in range(steps):
        s = t0 + k * ds_step
        sn = t0 + (k + 1) * ds_step
        in_layer = s >= T - eps_sim
        active = ~frozen
        if not active.any():
            break
        snapshot = type_idx.copy()
        for ti in range(n_types):
            m = active & (snapshot == ti)
            if not m.any():
                continue
            theta = thetas[ti]
            lam = lam_by[ti]
            xs = X[m]
            if override is not None:
                eta = np.full(xs.shape, float(override.eta))
                z = np.full(xs.shape, float(override.z))
            elif in_layer:
                rem = max(T - s, ds_step)
                eta = -np.log(np.maximum(-xs, 1e-300) / (rem * lam)) / lam
                eta = np.minimum(eta, env.payment_cap_C0)
                z = np.zeros(xs.shape)
            else:
                eta, z = policies[ti].at(s, xs)
            ride_m = riding[m]
            if ride_m.any():
                eta = np.where(ride_m, env.payment_cap_C0, eta)
                z = np.where(ride_m, 0.0, z)
            drift = lam * np.exp(-lam * eta) + 0.5 * theta * z * z
            rate = theta * z - eta
            xn = xs + drift * ds_step + z * (sqdt * eps[m, k])
            ub_n = env.upper_barrier(theta, sn)
            touched = xn >= ub_n
            if touched.any():
                riding[np.nonzero(m)[0][touched]] = True
                xn = np.where(touched, ub_n, xn)
            if ride_m.any():
                xn = np.where(ride_m, ub_n, xn)

            gap_s = xs - env.lower_barrier(theta, s)
            gap_n = xn - env.lower_barrier(theta, sn)
            crossed = gap_n <= 0.0
            pay = rate * ds_step
            if crossed.any():
                denom = gap_s[crossed] - gap_n[crossed]
                safe = np.where(denom > 0.0, denom, 1.0)
                frac = np.where(denom > 0.0,
                                np.clip(gap_s[crossed] / safe, 0.0, 1.0), 0.0)
                tau = s + frac * ds_step
                pay = pay.copy()
                pay[crossed] = rate[crossed] * frac * ds_step
                idx_c = np.nonzero(m)[0][crossed]
                quit_count[idx_c] += 1
                newly = first_quit[idx_c] >= T
                first_quit[idx_c[newly]] = tau[newly]
                if collect_events:
                    events_path.append(idx_c + lo)
                    events_tau.append(tau.copy())
                if stop_at_first_quit:
                    # credit the restart value (coupling curve) and freeze
                    pay[crossed] += np.interp(tau, family.ubar_times,
                                              family.ubar_values)
                    frozen[idx_c] = True
                    xn[crossed] = 0.0
                else:
                    pay[crossed] -= env.cP(tau)
                    vals = np.empty((n_types, tau.size))
                    for tj, th2 in enumerate(thetas):
                        vals[tj] = family.surfaces[tj].value_at(
                            tau, env.R(th2, tau))
                    new_type = np.argmax(vals, axis=0)
                    type_idx[idx_c] = new_type
                    r_new = np.empty(tau.size)
                    for tj, th2 in enumerate(thetas):
                        sel = new_type == tj
                        if sel.any():
                            r_new[sel] = env.R(th2, sn)
                    xn[crossed] = r_new
                if record_path:
                    for pos, pi in enumerate(idx_c):
                        if pi == 0:
                            rec_quits.append(float(tau[pos]))
                            if not stop_at_first_quit:
                                rec_hires.append(
                                    float(thetas[int(type_idx[0])]))
            payoff[m] += pay
            X[m] = xn
        if record_path and (k + 1) % record_stride == 0:
            rec_times.append(sn)
            rec_vals.append(float(X[0]))

    terminal_gap = np.where(frozen, 0.0, np.abs(X))
    out = {
        "payoff": payoff,
        "quit_count": quit_count,
        "first_quit": first_quit,
        "terminal_gap": terminal_gap,
    }
    if record_path:
        out["record"] = (np.asarray(rec_times), np.asarray(rec_vals),
                         rec_quits, rec_hires)
    if collect_events:
        if events_path:
            out["events"] = (np.concatenate(events_path),
                             np.concatenate(events_tau))
        else:
            out["events"] = (np.empty(0, dtype=int), np.empty(0))
    return out


def _eps_sim(policies, t0, steps, T):
    """Liquidation-layer width for the simulation: at least two steps wide
    and never thinner than the solver layer the policies were built with."""
    if steps < 8:
        raise ConfigurationError(
            "step count too small for the terminal layer (need >= 8 steps)")
    eps_list = [p.meta.get("eps_term", 0.0) or 0.0
                for p in policies if p is not None]
    eps_term = min(eps_list) if eps_list else 0.0
    ds_step = (T - t0) / steps
    return max(eps_term, 2.0 * ds_step)


def _check_start(env, family, start):
    theta0, t0, x0 = start
    env.theta_index(theta0)
    if not env.domain_contains(theta0, t0, x0):
        raise DomainError(f"start state {start} outside the solve domain")
    if float(theta0) not in family.thetas:
        raise DomainError(f"family has no slice for type {theta0}")


def simulate_chain(env, family, policies, start, steps, seed,
                   override=None, record_stride=1):
    """One chain; deterministic in (seed, inputs). Returns a ChainRecord."""
    env.require_valid()
    _check_start(env, family, start)
    T = env.horizon_T
    eps_sim = _eps_sim(policies, start[1], steps, T)
    out = _sim_block(env, family, policies, start, steps, seed, 0, 1,
                     override, False, True, eps_sim, record_stride)
    times, vals, quits, hires = out["record"]
    return ChainRecord(
        seed=seed, path_index=0, start=tuple(start),
        quit_times=quits, hired_types=hires,
        path_times=times, utility_path=vals,
        payoff=float(out["payoff"][0]),
        quit_count=int(out["quit_count"][0]),
        terminal_gap=float(out["terminal_gap"][0]),
    )


def estimate_value(env, family, policies, start, n_paths, steps, seed,
                   workers=1, override=None, stop_at_first_quit=False,
                   chunk=2048, collect_events=False):
    """Monte Carlo value estimate over independent per-path streams.

    Results are bit-identical for any worker count: path i always draws
    from the stream keyed (seed, i) and aggregation runs in path order.
    """
    env.require_valid()
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    _check_start(env, family, start)
    T = env.horizon_T
    eps_sim = _eps_sim(policies, start[1], steps, T)

    payoff = np.empty(n_paths)
    quits = np.empty(n_paths, dtype=int)
    first_quit = np.empty(n_paths)
    gap = np.empty(n_paths)

    ranges = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]
    chunk_events = [None] * len(ranges)

    def run(job):
        ci, (lo, hi) = job
        out = _sim_block(env, family, policies, start, steps, seed, lo, hi,
                         override, stop_at_first_quit, False, eps_sim,
                         collect_events=collect_events)
        payoff[lo:hi] = out["payoff"]
        quits[lo:hi] = out["quit_count"]
        first_quit[lo:hi] = out["first_quit"]
        gap[lo:hi] = out["terminal_gap"]
        if collect_events:
            chunk_events[ci] = out["events"]

    jobs = list(enumerate(ranges))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)

    mean = float(np.mean(payoff))
    stderr = float(np.std(payoff, ddof=1) / math.sqrt(n_paths))
    hist = np.bincount(quits, minlength=1)
    extras = {"first_quit_mean": float(np.mean(first_quit)),
              "payoffs": payoff, "quit_counts": quits,
              "first_quits": first_quit, "terminal_gaps": gap}
    if collect_events:
        ev_p = np.concatenate([e[0] for e in chunk_events])
        ev_t = np.concatenate([e[1] for e in chunk_events])
        extras["events"] = (ev_p, ev_t)
    return ValueEstimate(
        mean=mean, stderr=stderr, quit_count_hist=hist,
        mean_terminal_gap=float(np.mean(gap)), n_paths=n_paths,
        mean_quit_count=float(np.mean(quits)),
        extras=extras,
    )


def agent_value_backward(theta, eta, env, n_steps):
    """Agent's quit-aware value for a deterministic payment curve.

    Backward recursion Y_T = 0, Y_t = max(lower(t), Y_{t+dt} - lam*e^{-lam
    eta_t}*dt); the zero-exposure reduction of the reflected agent problem.
    Returns (times, Y, tau) with tau the smallest time at which Y sits on
    the barrier (the agent quits when indifferent), tau = T if never.
    """
    env.theta_index(theta)
    lam = env.lam(theta)
    T = env.horizon_T
    times = np.linspace(0.0, T, n_steps + 1)
    if callable(eta):
        eta_vals = np.asarray([float(eta(t)) for t in times])
    else:
        e_t, e_v = eta
        e_t = np.asarray(e_t, dtype=float)
        e_v = np.asarray(e_v, dtype=float)
        idx = np.clip(np.searchsorted(e_t, times, side="right") - 1, 0,
                      e_v.size - 1)
        eta_vals = e_v[idx]
    if np.max(eta_vals) > env.payment_cap_C0 + 1e-12:
        raise AdmissibilityError("payment curve exceeds the cap C0")

    low = env.lower_barrier(theta, times)
    dt = T / n_steps
    Y = np.empty(n_steps + 1)
    Y[-1] = 0.0
    for k in range(n_steps - 1, -1, -1):
        Y[k] = max(low[k], Y[k + 1] - lam * math.exp(-lam * eta_vals[k]) * dt)
    on_barrier = np.nonzero(Y <= low + 1e-14)[0]
    tau = float(times[on_barrier[0]]) if on_barrier.size else T
    return times, Y, tau


def dpp_check(env, family, policies, theta, t, n_paths, steps, seed,
              workers=1):
    """Time-consistency residual at the first quit time.

    Simulates to the first quit, credits the family's restart value there
    (the coupling curve), and compares the mean against the family value at
    (theta, t, R_theta(t)).  With no quits this degenerates to the plain
    MC-vs-PDE gap.
    """
    x0 = float(env.R(theta, t))
    est = estimate_value(env, family, policies, (theta, t, x0), n_paths,
                         steps, seed, workers=workers,
                         stop_at_first_quit=True)
    ref = float(family.value_at(theta, t, x0))
    return DppResult(
        residual=abs(est.mean - ref), estimate=est.mean, stderr=est.stderr,
        reference=ref, n_paths=n_paths,
    )
