"""Run configuration: a structured JSON document with four blocks.

environment:  theta list, lambda table, T, C0, per-type R / c_agent
              breakpoint lists, c_principal breakpoints, optional declared
              c0_floor and Lambda_lip.
solver:       n_time (0 = pick from the CFL bound), n_space, x_min_depth,
              z_max (null = 2.5 * theta_max), eta_min (null = adaptive
              payment-drift cap), eps_term (0 = 2*dt), tol, n_max, plus the
              secondary knobs below.
simulation:   n_paths, steps, seed.  The seed is required: no entropy
              defaults, every artifact must be reproducible.
output:       directory, formats.

Numbers round-trip at 17 significant digits; the canonical serialization of
the config is hashed into every artifact header.
"""

from __future__ import annotations

import hashlib
import json

from .hjb import SolverGrid
from .market import AgentTypeSet, Curve, MarketEnvironment

__all__ = ["ConfigError", "RunConfig", "baseline_config",
           "quit_gain_config", "multi_quit_config"]


class ConfigError(ValueError):
    """Malformed or incomplete run configuration."""


_SOLVER_DEFAULTS = {
    "n_time": 0,            # 0 -> smallest CFL-compliant count
    "n_space": 96,
    "x_min_depth": 20.0,
    "z_max": None,
    "eta_min": None,
    "eps_term": 0.0,        # 0 -> 2*dt
    "tol": 1e-4,
    "n_max": 50,
    "n_store": 257,
    "wide_n_space": 192,
    "z_rel": 2.0,
    "nu_eta": 6.0,
    "eps_eff": None,        # null -> 0.075*T
    "n_eta_ctrl": 20,
    "n_z_ctrl": 9,
    "cfl_safety": 0.90,
}

_SIM_DEFAULTS = {"n_paths": 10000, "steps": 2000, "seed": None}


def _fmt(x):
    return format(float(x), ".17g")


def canonical_json(obj):
    """Deterministic serialization: sorted keys, 17-significant-digit floats."""

    def walk(o):
        if isinstance(o, float):
            return float(_fmt(o))
        if isinstance(o, dict):
            return {k: walk(o[k]) for k in sorted(o)}
        if isinstance(o, (list, tuple)):
            return [walk(v) for v in o]
        return o

    return json.dumps(walk(obj), sort_keys=True, separators=(",", ":"))


class RunConfig:
    def __init__(self, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        try:
            env = doc["environment"]
        except KeyError:
            raise ConfigError("missing 'environment' block") from None
        for key in ("theta", "lambda", "T", "C0", "R", "c_agent", "c_principal"):
            if key not in env:
                raise ConfigError(f"environment block missing '{key}'")
        self.doc = doc
        self.environment = env
        self.solver = dict(_SOLVER_DEFAULTS)
        self.solver.update(doc.get("solver", {}))
        self.simulation = dict(_SIM_DEFAULTS)
        self.simulation.update(doc.get("simulation", {}))
        self.output = dict({"directory": "out", "formats": ["csv", "json"]})
        self.output.update(doc.get("output", {}))
        self._validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls(doc)

    def _validate(self):
        env = self.environment
        thetas = env["theta"]
        lams = env["lambda"]
        if not isinstance(thetas, list) or not thetas:
            raise ConfigError("environment.theta must be a non-empty list")
        if not isinstance(lams, list) or len(lams) != len(thetas):
            raise ConfigError("environment.lambda must match environment.theta")
        if len(env["R"]) != len(thetas) or len(env["c_agent"]) != len(thetas):
            raise ConfigError("R and c_agent need one breakpoint list per type")
        if env["T"] <= 0 or env["C0"] <= 0:
            raise ConfigError("T and C0 must be positive")
        s = self.solver
        for key in ("n_space", "x_min_depth", "tol", "n_max", "n_store",
                    "wide_n_space", "z_rel", "nu_eta", "n_eta_ctrl",
                    "n_z_ctrl", "cfl_safety"):
            if s[key] is None or s[key] <= 0:
                raise ConfigError(f"solver.{key} must be positive")
        if s["n_time"] < 0 or s["eps_term"] < 0:
            raise ConfigError("solver.n_time and solver.eps_term must be >= 0")
        for key in ("z_max", "eps_eff"):
            if s[key] is not None and s[key] <= 0:
                raise ConfigError(f"solver.{key} must be positive when given")
        sim = self.simulation
        if sim["seed"] is None:
            raise ConfigError("simulation.seed is required (no entropy defaults)")
        if not isinstance(sim["seed"], int) or sim["seed"] < 0:
            raise ConfigError("simulation.seed must be a nonnegative integer")
        if sim["n_paths"] < 2 or sim["steps"] < 8:
            raise ConfigError("simulation.n_paths >= 2 and steps >= 8 required")

    # -- construction ---------------------------------------------------

    def build_environment(self):
        env = self.environment
        types = AgentTypeSet(env["theta"], env["lambda"])
        T = float(env["T"])
        R = [Curve(b) for b in env["R"]]
        c_agent = [Curve(b) for b in env["c_agent"]]
        cP = Curve(env["c_principal"])
        market = MarketEnvironment(
            types, T, float(env["C0"]), R, c_agent, cP,
            c0_floor=env.get("c0_floor"), Lambda_lip=env.get("Lambda_lip"))
        market.config_hash = self.hash()
        return market

    def build_grid(self):
        s = self.solver
        return SolverGrid(
            n_space=int(s["n_space"]),
            n_time=None if s["n_time"] in (0, None) else int(s["n_time"]),
            n_store=int(s["n_store"]),
            wide_n_space=int(s["wide_n_space"]),
            x_min_depth=float(s["x_min_depth"]),
            z_rel=float(s["z_rel"]),
            z_abs=None if s["z_max"] is None else float(s["z_max"]),
            nu_eta=float(s["nu_eta"]),
            eps_eff=None if s["eps_eff"] is None else float(s["eps_eff"]),
            eps_term=None if s["eps_term"] in (0, None) else float(s["eps_term"]),
            eta_min=None if s["eta_min"] is None else float(s["eta_min"]),
            n_eta_ctrl=int(s["n_eta_ctrl"]),
            n_z_ctrl=int(s["n_z_ctrl"]),
            cfl_safety=float(s["cfl_safety"]),
        )

    def refined(self, k):
        """New config with dx and the simulation step halved k times."""
        doc = json.loads(json.dumps(self.doc))
        solver = doc.setdefault("solver", {})
        solver["n_space"] = int(self.solver["n_space"]) * 2 ** k
        solver["wide_n_space"] = int(self.solver["wide_n_space"]) * 2 ** k
        if self.solver["n_time"] not in (0, None):
            solver["n_time"] = int(self.solver["n_time"]) * 4 ** k
        sim = doc.setdefault("simulation", {})
        sim["steps"] = int(self.simulation["steps"]) * 2 ** k
        return RunConfig(doc)

    def with_seed(self, seed):
        doc = json.loads(json.dumps(self.doc))
        doc.setdefault("simulation", {})["seed"] = int(seed)
        return RunConfig(doc)

    def canonical(self):
        doc = {
            "environment": self.environment,
            "solver": self.solver,
            "simulation": self.simulation,
            "output": {k: v for k, v in self.output.items() if k != "directory"},
        }
        return canonical_json(doc)

    def hash(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


# -- bundled configurations ---------------------------------------------


def baseline_config(seed=20240, **solver_overrides):
    """Single-type reference market: lambda = 1, C0 = 1, T = 1, R = 2*Lbar,
    c_agent = 0.1, c_principal = 0.05."""
    T, C0, lam = 1.0, 1.0, 1.0
    ub0 = -lam * pow(2.718281828459045, -lam * C0) * T
    doc = {
        "environment": {
            "theta": [1.0],
            "lambda": [lam],
            "T": T,
            "C0": C0,
            "R": [[[0.0, 2.0 * ub0], [T, 0.0]]],
            "c_agent": [[[0.0, 0.1], [T, 0.1]]],
            "c_principal": [[0.0, 0.05], [T, 0.05]],
        },
        "solver": dict(solver_overrides),
        "simulation": {"n_paths": 10000, "steps": 2000, "seed": seed},
        "output": {"directory": "out"},
    }
    return RunConfig(doc)


def quit_gain_config(c0_cap=1.0, drop_n=100.0, seed=20240, **solver_overrides):
    """Two-type market engineered so a mid-horizon market drop makes the
    replacement hire so cheap that encouraging a quit beats retention.

    Start type theta0 = 1.0; drop type theta1 = 0.9 whose IR falls to
    x0 - n/2 at t = 1/2.  Both types have lambda = 1; quit cost e^{-C0},
    no principal-side cost; x0 = -2 e^{-C0}.
    """
    import math as _math

    T = 1.0
    e = _math.exp(-c0_cap)
    x0 = -2.0 * e
    n = float(drop_n)
    # start type: IR rises to -e/2 at t=1/2, then -e*(1-t)
    r0 = [[0.0, x0], [0.5, x0 + 1.5 * e], [1.0, 0.0]]
    # drop type: IR falls to x0 - n/2 at t=1/2, then back to 0 linearly
    r1 = [[0.0, x0], [0.5, x0 - 0.5 * n], [1.0, 0.0]]
    doc = {
        "environment": {
            "theta": [0.9, 1.0],
            "lambda": [1.0, 1.0],
            "T": T,
            "C0": c0_cap,
            "R": [r1, r0],
            "c_agent": [[[0.0, e], [T, e]], [[0.0, e], [T, e]]],
            "c_principal": [[0.0, 0.0], [T, 0.0]],
        },
        "solver": dict(solver_overrides),
        "simulation": {"n_paths": 4000, "steps": 2000, "seed": seed},
        "output": {"directory": "out"},
    }
    return RunConfig(doc)


def multi_quit_config(seed=20240, quit_cost=0.03, n_teeth=10,
                      **solver_overrides):
    """Low-cost single-type market engineered to produce many quits.

    The IR curve is a sawtooth between 2*Lbar (valleys, cheap hires) and
    1.4*Lbar (peaks): each tooth's rising edge climbs faster than any
    affordable payment drift, so the quit barrier sweeps through the agent's
    utility roughly once per tooth, and quitting is nearly free for the
    principal.
    """
    import math as _math

    T, C0, lam = 1.0, 1.0, 1.0

    def ub(t):
        return -lam * _math.exp(-lam * C0) * (T - t)

    rise = 0.012
    pts = []
    for i in range(n_teeth):
        t0 = i / n_teeth
        pts.append([t0, 2.0 * ub(t0)])
        tp = t0 + rise
        pts.append([tp, 1.4 * ub(tp)])
    pts.append([T, 0.0])
    doc = {
        "environment": {
            "theta": [1.0],
            "lambda": [lam],
            "T": T,
            "C0": C0,
            "R": [pts],
            "c_agent": [[[0.0, quit_cost], [T, quit_cost]]],
            "c_principal": [[0.0, 0.002], [T, 0.002]],
        },
        "solver": dict(solver_overrides),
        "simulation": {"n_paths": 10000, "steps": 2000, "seed": seed},
        "output": {"directory": "out"},
    }
    return RunConfig(doc)
