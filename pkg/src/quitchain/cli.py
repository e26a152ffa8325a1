"""Command-line front end and bit-stable artifact serialization.

Commands: validate, solve-u0, solve, simulate, dpp-check,
example-quit-gain, report.  Every artifact carries a header with the config
hash, grid summary and clip-flag fractions so results are traceable to
their exact inputs; floats are written with 17 significant digits so that
serialize -> parse -> re-serialize is byte-identical.  No wall-clock data
goes into artifacts: identical config + seed gives identical bytes for any
worker count.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from . import recursion, simulate
from .config import ConfigError, RunConfig, quit_gain_config
from .hjb import solve_u0
from .market import validate_environment

__all__ = ["main", "run", "write_surface_csv", "read_surface_csv",
           "write_ubar_csv", "write_chains_csv"]

_FMT = ".17g"


def _f(x):
    return format(float(x), _FMT)


def _header_lines(cfg, extra=None):
    lines = [f"# config_hash: {cfg.hash()}"]
    s = cfg.solver
    lines.append(
        "# grid: n_space={} wide_n_space={} n_store={} n_time={} tol={} n_max={}".format(
            s["n_space"], s["wide_n_space"], s["n_store"], s["n_time"],
            _f(s["tol"]), s["n_max"]))
    for k, v in (extra or {}).items():
        lines.append(f"# {k}: {v}")
    return lines


def write_surface_csv(path, surface, cfg):
    clip = surface.meta.get("clip_fractions", {})
    extra = {
        "theta": _f(surface.theta),
        "kind": surface.kind,
        "quit_index": surface.quit_index,
        "clip": " ".join(f"{k}={_f(v)}" for k, v in sorted(clip.items())),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in _header_lines(cfg, extra):
            fh.write(line + "\n")
        fh.write("theta,t,x,u,flag\n")
        for i in range(surface.n_rows):
            x = surface.x_nodes(i)
            v = surface.values[i]
            fl = surface.flags[i]
            t = surface.times[i]
            for j in range(x.size):
                fh.write(f"{_f(surface.theta)},{_f(t)},{_f(x[j])},"
                         f"{_f(v[j])},{int(fl[j])}\n")


def read_surface_csv(path):
    """Parse a surface CSV back into (header, rows) for round-trip checks."""
    header = []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                header.append(line)
            elif line and not line.startswith("theta,"):
                th, t, x, u, fl = line.split(",")
                rows.append((float(th), float(t), float(x), float(u), int(fl)))
    return header, rows


def rewrite_surface_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header:
            fh.write(line + "\n")
        fh.write("theta,t,x,u,flag\n")
        for th, t, x, u, fl in rows:
            fh.write(f"{_f(th)},{_f(t)},{_f(x)},{_f(u)},{fl}\n")


def write_ubar_csv(path, times, values, cfg):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in _header_lines(cfg):
            fh.write(line + "\n")
        fh.write("t,ubar\n")
        for t, v in zip(times, values):
            fh.write(f"{_f(t)},{_f(v)}\n")


def write_chains_csv(path, est, cfg, base_seed):
    """Per-chain rows (seed, quit_count, payoff, terminal_gap, tau_1..tau_k).

    The seed column holds the per-path stream index; the base seed is in
    the header (path i draws from the stream keyed (base_seed, i)).
    """
    payoffs = est.extras["payoffs"]
    quits = est.extras["quit_counts"]
    gaps = est.extras["terminal_gaps"]
    ev_p, ev_t = est.extras["events"]
    n = payoffs.size
    per_path = [[] for _ in range(n)]
    for p, t in zip(ev_p, ev_t):
        per_path[int(p)].append(float(t))
    k_max = max((len(v) for v in per_path), default=0)
    cols = ",".join(f"tau_{i + 1}" for i in range(k_max))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in _header_lines(cfg, {"base_seed": base_seed}):
            fh.write(line + "\n")
        fh.write("seed,quit_count,payoff,terminal_gap" +
                 ("," + cols if cols else "") + "\n")
        for i in range(n):
            taus = per_path[i]
            row = [str(i), str(int(quits[i])), _f(payoffs[i]), _f(gaps[i])]
            row += [_f(t) for t in taus]
            row += [""] * (k_max - len(taus))
            fh.write(",".join(row) + "\n")


def _json_dump(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _theta_tag(theta):
    return _f(theta).replace(".", "p").replace("-", "m")


def _solve_family(cfg, env, grid):
    family, report = recursion.fixed_point(
        env, grid, tol=float(cfg.solver["tol"]), n_max=int(cfg.solver["n_max"]))
    return family, report


def _policies_for(family, env):
    return [simulate.extract_policy(s, env) for s in family.surfaces]


def _start_state(env, family):
    """Default simulation start: best type at t=0 on its IR curve."""
    _, theta = recursion.principal_value_best(family, 0.0, env)
    return (theta, 0.0, float(env.R(theta, 0.0)))


def run(cfg, command, out_dir=None, workers=1, refine=0):
    """Execute one command; returns (exit_status, artifact dict)."""
    if refine:
        cfg = cfg.refined(refine)
    out_dir = out_dir or cfg.output.get("directory", "out")
    os.makedirs(out_dir, exist_ok=True)
    env = cfg.build_environment()
    report = validate_environment(env)
    _json_dump(os.path.join(out_dir, "validation.json"),
               {"header": {"config_hash": cfg.hash()}, **report.as_dict()})
    if command == "validate":
        return (0 if report.passed else 2), {"validation": report.as_dict()}
    if not report.passed:
        return 2, {"validation": report.as_dict(),
                   "error": "environment failed validation"}

    grid = cfg.build_grid()
    seed = int(cfg.simulation["seed"])

    if command == "solve-u0":
        artifacts = {}
        for theta in env.types.theta_values:
            wide = solve_u0(float(theta), env, grid)
            name = f"surface_u0_{_theta_tag(theta)}.csv"
            write_surface_csv(os.path.join(out_dir, name), wide, cfg)
            artifacts[name] = wide.meta.get("clip_fractions")
        return 0, artifacts

    family, conv = _solve_family(cfg, env, grid)

    if command == "solve":
        for theta, surf in zip(family.thetas, family.surfaces):
            name = f"surface_{_theta_tag(theta)}.csv"
            write_surface_csv(os.path.join(out_dir, name), surf, cfg)
        write_ubar_csv(os.path.join(out_dir, "ubar.csv"),
                       family.ubar_times, family.ubar_values, cfg)
        _json_dump(os.path.join(out_dir, "convergence.json"),
                   {"header": {"config_hash": cfg.hash()}, **conv.as_dict()})
        return 0, {"convergence": conv.as_dict()}

    policies = _policies_for(family, env)
    start = _start_state(env, family)

    if command == "simulate":
        est = simulate.estimate_value(
            env, family, policies, start,
            n_paths=int(cfg.simulation["n_paths"]),
            steps=int(cfg.simulation["steps"]), seed=seed,
            workers=workers, collect_events=True)
        write_chains_csv(os.path.join(out_dir, "chains.csv"), est, cfg, seed)
        summary = {
            "header": {"config_hash": cfg.hash()},
            "start": {"theta": start[0], "t": start[1], "x": start[2]},
            "pde_value": recursion.principal_value(family, start[0],
                                                   start[1], env),
            **est.as_dict(),
        }
        _json_dump(os.path.join(out_dir, "estimate.json"), summary)
        return 0, {"estimate": summary}

    if command == "dpp-check":
        res = simulate.dpp_check(
            env, family, policies, start[0], start[1],
            n_paths=int(cfg.simulation["n_paths"]),
            steps=int(cfg.simulation["steps"]), seed=seed, workers=workers)
        doc = {"header": {"config_hash": cfg.hash()},
               "start": {"theta": start[0], "t": start[1]}, **res.as_dict()}
        _json_dump(os.path.join(out_dir, "dpp.json"), doc)
        return 0, {"dpp": doc}

    if command == "report":
        est = simulate.estimate_value(
            env, family, policies, start,
            n_paths=int(cfg.simulation["n_paths"]),
            steps=int(cfg.simulation["steps"]), seed=seed,
            workers=workers, collect_events=True)
        res = simulate.dpp_check(
            env, family, policies, start[0], start[1],
            n_paths=int(cfg.simulation["n_paths"]),
            steps=int(cfg.simulation["steps"]), seed=seed, workers=workers)
        write_ubar_csv(os.path.join(out_dir, "ubar.csv"),
                       family.ubar_times, family.ubar_values, cfg)
        write_chains_csv(os.path.join(out_dir, "chains.csv"), est, cfg, seed)
        # plot-ready best-type value curve
        vp_path = os.path.join(out_dir, "vp_curve.csv")
        with open(vp_path, "w", encoding="utf-8", newline="\n") as fh:
            for line in _header_lines(cfg):
                fh.write(line + "\n")
            fh.write("t,vp,theta_star\n")
            for i, t in enumerate(family.ubar_times):
                vp = family.ubar_values[i] + float(env.cP(t))
                th = family.thetas[int(family.argmax_idx[i])]
                fh.write(f"{_f(t)},{_f(vp)},{_f(th)}\n")
        summary = {
            "header": {"config_hash": cfg.hash()},
            "validation": report.as_dict(),
            "convergence": conv.as_dict(),
            "estimate": est.as_dict(),
            "dpp": res.as_dict(),
            "start": {"theta": start[0], "t": start[1], "x": start[2]},
            "pde_value": recursion.principal_value(family, start[0],
                                                   start[1], env),
        }
        _json_dump(os.path.join(out_dir, "summary.json"), summary)
        return 0, {"summary": summary}

    raise ConfigError(f"unknown command {command!r}")


def run_quit_gain(c0_cap, drop_n, out_dir, seed=20240, solver_overrides=None,
                  workers=1):
    """Generate the two-type market-drop environment and verify the
    quit-gain inequality: the one-quit value at the start state beats the
    no-quit value, with the closed-form lower bound
    0.5*ln(n + 4 e^{-C0}) - 0.5*C0 reported alongside."""
    cfg = quit_gain_config(c0_cap=c0_cap, drop_n=drop_n, seed=seed,
                           **(solver_overrides or {}))
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "quitgain_config.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.canonical() + "\n")
    env = cfg.build_environment()
    report = validate_environment(env)
    if not report.passed:
        return 2, {"validation": report.as_dict()}
    grid = cfg.build_grid()
    theta0 = 1.0
    x0 = -2.0 * math.exp(-c0_cap)
    fam0, _ = recursion.solve_level0(env, grid)
    fam1 = recursion.iterate_level(fam0, env, grid)
    u0_val = float(fam0.value_at(theta0, 0.0, x0))
    u1_val = float(fam1.value_at(theta0, 0.0, x0))
    bound = 0.5 * math.log(drop_n + 4.0 * math.exp(-c0_cap)) - 0.5 * c0_cap
    scheme_tol = 10.0 * (env.width(theta0, 0.0) / grid.n_space
                         + 1.0 / fam1.surfaces[0].meta["n_time"])
    doc = {
        "header": {"config_hash": cfg.hash()},
        "C0": c0_cap, "drop_n": drop_n, "x0": x0,
        "u0_at_start": u0_val, "u1_at_start": u1_val,
        "closed_form_lower_bound": bound,
        "scheme_tolerance": scheme_tol,
        "quit_gain_holds": bool(u1_val > u0_val),
        "bound_holds": bool(u1_val >= bound - scheme_tol),
        "u0_start_type_is_best": bool(
            u0_val >= float(fam0.value_at(0.9, 0.0, x0)) - 1e-9),
    }
    _json_dump(os.path.join(out_dir, "quitgain.json"), doc)
    ok = doc["quit_gain_holds"] and doc["bound_holds"]
    return (0 if ok else 3), doc


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="quitchain",
        description="Contract-chain value functions, policies and "
                    "Monte Carlo validation.")
    parser.add_argument("command", choices=[
        "validate", "solve-u0", "solve", "simulate", "dpp-check",
        "example-quit-gain", "report"])
    parser.add_argument("--config", help="path to the JSON run config")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--refine", type=int, default=0, metavar="K",
                        help="halve dx (and the simulation step) K times")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--c0", type=float, default=1.0,
                        help="payment cap for example-quit-gain")
    parser.add_argument("--drop-n", type=float, default=100.0,
                        help="market-drop size for example-quit-gain")
    args = parser.parse_args(argv)

    try:
        if args.command == "example-quit-gain":
            status, doc = run_quit_gain(
                args.c0, args.drop_n, args.out or "out",
                seed=args.seed if args.seed is not None else 20240,
                workers=args.workers)
            print(json.dumps(doc, sort_keys=True, default=str))
            return status
        if not args.config:
            raise ConfigError("--config is required for this command")
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        status, artifacts = run(cfg, args.command, out_dir=args.out,
                                workers=args.workers, refine=args.refine)
        print(json.dumps({"status": status,
                          "artifacts": sorted(artifacts.keys())},
                         sort_keys=True))
        return status
    except ConfigError as exc:
        print(json.dumps({"error": "config", "detail": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
