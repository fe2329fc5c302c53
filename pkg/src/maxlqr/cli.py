"""Command-line front end.

Subcommands cover the package's workflows end to end: open-loop
simulation with energy and constraint audits, tangent-space
linearization, gain synthesis, basin sweeps, and perturbed tracking
studies. Options can come from a JSON config file (--config); explicit
flags win over the file. Every run that writes outputs also writes a
config echo next to them, so a results directory is self-describing.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import dynamics as dyn
from . import experiments as ex
from .errors import MaxlqrError
from .linearize import linearize
from .lqr import infinite_horizon
from .systems import BUILDERS, make, matched_cost

_SCALAR_TEST = "scalar-test"


def _system_names():
    return sorted(BUILDERS)


def _get_system(name, parser):
    try:
        return make(name)
    except KeyError:
        parser.error(f"unknown system {name!r}; valid choices: "
                     + ", ".join(_system_names()))


def _parse_init(text, system, parser):
    c0 = system.ref_coords.copy()
    if text is None:
        return c0
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        parser.error(f"--init must be comma-separated numbers, got {text!r}")
    if len(values) > system.n_min:
        parser.error(f"--init has {len(values)} values but {system.name} "
                     f"has {system.n_min} coordinates")
    c0[:len(values)] = values
    return c0


def _echo_config(args, out_dir):
    echo = {k: v for k, v in sorted(vars(args).items())
            if k not in ("func",)}
    ex.write_json(os.path.join(out_dir, "config_echo.json"), echo)


def _ensure_out(args):
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        _echo_config(args, args.out)
    return args.out


# ---------------------------------------------------------------------------
# subcommand bodies

def _cmd_simulate(args, parser):
    system = _get_system(args.system, parser)
    c0 = _parse_init(args.init, system, parser)
    z = system.state_from_minimal(c0)
    mech = system.mech
    u = np.zeros(mech.n_controls) if args.zero_input else system.u_ref
    n_steps = round(args.horizon / args.dt)

    states = [z]
    energies = [dyn.total_energy(mech, z)]
    max_violation = float(np.max(np.abs(dyn.evaluate_constraints(mech, z)),
                                 initial=0.0))
    for _ in range(n_steps):
        z, _ = dyn.step(mech, z, u, args.dt)
        states.append(z)
        energies.append(dyn.total_energy(mech, z))
        g = dyn.evaluate_constraints(mech, z)
        if g.size:
            max_violation = max(max_violation, float(np.max(np.abs(g))))

    energies = np.asarray(energies)
    scale = max(abs(energies[0]), 1.0)
    drift = float(np.max(np.abs(energies - energies[0])) / scale)
    print(f"simulated {args.system} for {args.horizon:g} s "
          f"({n_steps} steps of {args.dt:g})")
    print(f"max constraint violation: {max_violation:.3e}")
    if args.check_energy:
        print(f"max relative energy drift: {drift:.3e}")

    out = _ensure_out(args)
    if out is not None:
        raw = np.array([s.raw() for s in states])
        np.save(os.path.join(out, f"simulate_{args.system}_states.npy"), raw)
        np.save(os.path.join(out, f"simulate_{args.system}_energy.npy"),
                energies)
        ex.write_json(os.path.join(out, f"simulate_{args.system}.json"),
                      {"system": args.system, "steps": n_steps,
                       "dt": args.dt,
                       "max_constraint_violation": max_violation,
                       "max_relative_energy_drift": drift})
    return 0


def _cmd_linearize(args, parser):
    system = _get_system(args.system, parser)
    lin = linearize(system.mech, system.reference, system.u_ref, dt=args.dt)
    rho = float(np.max(np.abs(np.linalg.eigvals(lin.A))))
    print(f"{args.system}: A {lin.A.shape}, B {lin.B.shape}, "
          f"C {lin.C.shape}, G {lin.G.shape}")
    print(f"open-loop spectral radius: {rho:.6f}")
    out = _ensure_out(args)
    if out is not None:
        stem = os.path.join(out, f"linearize_{args.system}_")
        for label, mat in (("A", lin.A), ("B", lin.B), ("C", lin.C),
                           ("G", lin.G)):
            np.save(stem + label + ".npy", mat)
    return 0


def _cmd_gains(args, parser):
    if args.system == _SCALAR_TEST:
        one = np.eye(1)
        sizes = (one, one, np.zeros((1, 0)), np.zeros((0, 1)))
        gains, iters = infinite_horizon(sizes, one, one)
        print(f"scalar self-check: K = {gains.K[0, 0]:.6f} "
              f"(expected 0.618034), {iters} iterations")
        return 0
    system = _get_system(args.system, parser)
    if args.coords == "maximal":
        lin = linearize(system.mech, system.reference, system.u_ref,
                        dt=args.dt)
        Q, R = matched_cost(system)
        gains, iters = infinite_horizon(lin, Q, R)
        K, L = gains.K, gains.L
    else:
        from .minimal import make_minimal, minimal_gains
        model = make_minimal(args.system)
        gains, iters = minimal_gains(model, dt=args.dt)
        K, L = gains.K, gains.L
    print(f"{args.system} ({args.coords}): K {K.shape}, "
          f"|K| = {np.linalg.norm(K):.6f}, converged in {iters} iterations")
    out = _ensure_out(args)
    if out is not None:
        stem = os.path.join(out, f"gains_{args.system}_{args.coords}_")
        np.save(stem + "K.npy", K)
        np.save(stem + "L.npy", L)
        np.save(stem + "P.npy", gains.P)
    return 0


def _coords_list(choice):
    return ["maximal", "minimal"] if choice == "both" else [choice]


def _cmd_basin(args, parser):
    _get_system(args.system, parser)
    out = _ensure_out(args)
    counts = {}
    for coords in _coords_list(args.coords):
        cfg = ex.basin_config(args.system, coords, args.preset)
        if args.horizon is not None:
            cfg.horizon = args.horizon
        if args.dt is not None:
            cfg.dt = args.dt
        _, summary = ex.basin_of_attraction(cfg, out_dir=out,
                                            jobs=args.jobs)
        counts[coords] = summary["basin_cells"]
        print(f"{args.system} {coords}: {summary['counts']} "
              f"-> basin {summary['basin_cells']}/{summary['cells']}")
    if len(counts) == 2:
        print(f"basin cells, full vs reduced controller: "
              f"{counts['maximal']} vs {counts['minimal']}")
    return 0


def _cmd_track(args, parser):
    system = _get_system(args.system, parser)
    out = _ensure_out(args)
    cfg = ex.tracking_config(args.system, args.preset, args.seed)
    if args.runs is not None:
        cfg.runs = args.runs
    if args.noise_sigma is not None:
        cfg.noise_sigma = args.noise_sigma
    if args.nominal is not None:
        nominal = ex.load_trajectory(args.nominal)
    else:
        nominal = ex.swing_nominal(system, dt=cfg.dt)
    if out is not None:
        ex.save_trajectory(
            os.path.join(out, f"nominal_{args.system}.traj"), nominal)
    stats = {}
    for coords in _coords_list(args.coords):
        _, aggregate = ex.tracking_experiment(cfg, nominal, coords,
                                              out_dir=out, jobs=args.jobs)
        stats[coords] = aggregate
        print(f"{args.system} {coords}: accumulated cost "
              f"{aggregate['mean_accumulated_cost']:.4f} "
              f"+/- {aggregate['std_accumulated_cost']:.4f} "
              f"({aggregate['divergence_count']} diverged)")
    if len(stats) == 2:
        a = stats["maximal"]["mean_accumulated_cost"]
        b = stats["minimal"]["mean_accumulated_cost"]
        print(f"mean accumulated cost, full vs reduced controller: "
              f"{a:.4f} vs {b:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="maxlqr",
        description="Constrained linear-quadratic control of rigid-body "
                    "mechanisms in full coordinates.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option overrides "
                                         "(explicit flags win)")
    common.add_argument("--out", help="directory for output files")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="roll a mechanism open loop and audit it")
    p.add_argument("--system", required=True)
    p.add_argument("--init", help="comma-separated reduced coordinates "
                                  "(prefix; rest stays at the reference)")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--zero-input", action="store_true",
                   help="drive with zeros instead of the reference input")
    p.add_argument("--check-energy", action="store_true",
                   help="report the maximum relative energy drift")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("linearize", parents=[common],
                       help="tangent-space model about the reference")
    p.add_argument("--system", required=True)
    p.add_argument("--dt", type=float, default=1e-3)
    p.set_defaults(func=_cmd_linearize)

    p = sub.add_parser("gains", parents=[common],
                       help="infinite-horizon feedback gains")
    p.add_argument("--system", required=True,
                   help=f"mechanism name, or {_SCALAR_TEST!r} for the "
                        f"scalar self-check")
    p.add_argument("--coords", choices=("maximal", "minimal"),
                   default="maximal")
    p.add_argument("--dt", type=float, default=1e-3)
    p.set_defaults(func=_cmd_gains)

    p = sub.add_parser("basin", parents=[common],
                       help="grid the start set and classify every cell")
    p.add_argument("--system", required=True)
    p.add_argument("--coords", choices=("maximal", "minimal", "both"),
                   default="both")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_basin)

    p = sub.add_parser("track", parents=[common],
                       help="replay a nominal against perturbed plants")
    p.add_argument("--system", required=True)
    p.add_argument("--coords", choices=("maximal", "minimal", "both"),
                   default="both")
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--nominal", help="trajectory file to track "
                                     "(default: stock sinusoidal drive)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_track)

    return parser, sub


def main(argv=None):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        with open(args.config) as f:
            overrides = json.load(f)
        chosen = sub.choices[args.command]
        valid = {a.dest for a in chosen._actions}
        unknown = sorted(set(overrides) - valid)
        if unknown:
            parser.error(f"unknown config keys for {args.command!r}: "
                         + ", ".join(unknown))
        chosen.set_defaults(**overrides)
        args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except MaxlqrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
