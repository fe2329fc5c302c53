"""Closed-loop controller studies on the full mechanisms.

Two experiment families live here. Basin sweeps grid the configuration
space, start the plant at rest at every cell, and record whether state
feedback brings it inside a fixed error radius within the horizon.
Tracking studies roll a feasible nominal trajectory, synthesize
time-varying gains along it, and replay it many times against randomly
perturbed plants with input noise.

Both full-state and reduced-coordinate controllers drive the same
physics: a reduced controller reads the plant state through the chart
and feeds back on the coordinate error. Costs and convergence tests
are measured in the reduced coordinates for every controller, which is
what makes the comparisons commensurable. Experiment outputs are plain
CSV and JSON with repr-exact floats, so a fixed seed reproduces every
file byte for byte; work items carry pre-split RNG streams, so the
--jobs level cannot change results either.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import dynamics as dyn
from .bodies import Mechanism, MechanismState, Multipliers, tangent_error
from .errors import AssemblyFailure, InconsistentNominal, MaxlqrError
from .linearize import linearize_trajectory
from .lqr import finite_horizon, infinite_horizon
from .minimal import (linearize_minimal, make_minimal, matched_cost_matrix,
                      minimal_gains)
from .systems import chart_jacobian, make, matched_cost

BLOWUP_OMEGA = 100.0 * math.pi
CONVERGENCE_RADIUS = 0.1


@dataclass
class Outcome:
    """How a closed-loop rollout ended.

    kind is one of converged, timeout, diverged, infeasible. time holds
    the first instant the error entered the radius; max_omega the
    largest angular-rate magnitude seen along the way.
    """

    kind: str
    time: float = math.nan
    max_omega: float = 0.0
    reason: str = ""


@dataclass
class TrajectoryRecord:
    """One rollout: states, controls, reactions, and running cost."""

    times: np.ndarray
    states: list
    controls: np.ndarray
    multipliers: list
    stage_costs: np.ndarray
    accumulated_cost: float


def _step_count(horizon, dt):
    n = horizon / dt
    if abs(n - round(n)) > 1e-9 * max(1.0, abs(n)):
        raise ValueError(f"horizon {horizon} is not a whole number of "
                         f"steps of {dt}")
    return int(round(n))


def simulate_closed_loop(mech, controller, z0, horizon, dt,
                         error_fn=None, convergence_radius=CONVERGENCE_RADIUS,
                         blowup_omega=BLOWUP_OMEGA, cost_fn=None,
                         record_states=True):
    """Roll the plant under feedback with the standard stop rules.

    controller maps (step index, state) to a control vector; the
    regulator and tracker helpers build such callables from gain sets.
    When error_fn is given, the rollout stops as converged the first
    time the Euclidean norm of error_fn(state) drops below the radius
    (checked at the start, so a reference start converges at t=0).
    Any angular-rate component beyond blowup_omega, or a solver
    failure, ends the rollout as diverged. Running to the horizon
    without converging is a timeout. Returns (record, outcome).
    """
    n_steps = _step_count(horizon, dt)
    m = mech.n_controls
    states = [z0] if record_states else []
    controls = np.zeros((n_steps, m))
    mults = []
    costs = np.zeros(n_steps)
    max_omega = float(np.max(np.abs(z0.w))) if z0.w.size else 0.0

    def finish(kind, k, t=math.nan, reason=""):
        if record_states and not states:
            states.append(z0)
        times = np.arange(k + 1) * dt
        rec = TrajectoryRecord(times, states, controls[:k], mults,
                               costs[:k], float(np.sum(costs[:k])))
        return rec, Outcome(kind, t, max_omega, reason)

    if error_fn is not None and \
            np.linalg.norm(error_fn(z0)) < convergence_radius:
        return finish("converged", 0, t=0.0)

    z = z0
    for k in range(n_steps):
        u = np.asarray(controller(k, z), dtype=float)
        controls[k] = u
        if cost_fn is not None:
            costs[k] = cost_fn(k, z, u)
        try:
            z, mult = dyn.step(mech, z, u, dt)
        except MaxlqrError as exc:
            return finish("diverged", k, reason=type(exc).__name__)
        if record_states:
            states.append(z)
        mults.append(mult)
        max_omega = max(max_omega, float(np.max(np.abs(z.w))))
        if max_omega > blowup_omega:
            return finish("diverged", k + 1, reason="omega")
        if error_fn is not None and \
                np.linalg.norm(error_fn(z)) < convergence_radius:
            return finish("converged", k + 1, t=(k + 1) * dt)
    kind = "timeout" if error_fn is not None else "completed"
    return finish(kind, n_steps)


# ---------------------------------------------------------------------------
# controllers

def regulator(system, K, coords):
    """Constant-gain feedback about the system reference.

    coords picks what the gain multiplies: 'maximal' pairs it with the
    full tangent-space error, 'minimal' with the wrapped reduced-
    coordinate error read through the chart. Either way the control is
    applied to the full plant.
    """
    if coords == "maximal":
        def control(k, z):
            return system.u_ref - K @ tangent_error(z, system.reference)
    elif coords == "minimal":
        def control(k, z):
            return system.u_ref - K @ system.chart_error(z)
    else:
        raise ValueError(f"unknown coordinate choice {coords!r}")
    return control


def regulator_gains(system, coords, dt):
    """Infinite-horizon gain matrix for one coordinate choice."""
    if coords == "maximal":
        from .linearize import linearize
        lin = linearize(system.mech, system.reference, system.u_ref, dt=dt)
        Qm, Rm = matched_cost(system)
        gains, _ = infinite_horizon(lin, Qm, Rm)
        return gains.K
    model = make_minimal(system.name)
    gains, _ = minimal_gains(model, dt=dt)
    return gains.K


def tracking_gains(system, nominal, dt, coords):
    """Time-varying gain schedule along a nominal trajectory.

    The full-coordinate schedule comes from the constrained recursion
    over the per-step tangent models, with the stage weights re-matched
    to the reduced weights at every nominal state. The reduced schedule
    linearizes the reduced plant along the mapped nominal. Returns
    (list of gain matrices, list of reduced nominal coordinates).
    """
    states = nominal.states
    controls = nominal.controls
    n_steps = len(controls)
    c_nom = [system.minimal_coords(z) for z in states]
    if coords == "maximal":
        systems = linearize_trajectory(system.mech, states, list(controls),
                                       nominal.multipliers, dt)
        Qs = [matched_cost_matrix(system.Q, chart_jacobian(system, z))
              for z in states[:-1]]
        QN = matched_cost_matrix(system.Q, chart_jacobian(system, states[-1]))
        schedule = finite_horizon(systems, Qs, system.R, QN)
        Ks = [g.K for g in schedule]
    else:
        model = make_minimal(system.name)
        n = model.n_min
        empty_c = np.zeros((n, 0))
        empty_g = np.zeros((0, n))
        systems = []
        for k in range(n_steps):
            A, B = linearize_minimal(model, c_nom[k], controls[k], dt)
            systems.append((A, B, empty_c, empty_g))
        schedule = finite_horizon(systems, model.Q, model.R)
        Ks = [g.K for g in schedule]
    return Ks, c_nom


def tracker(system, Ks, u_nom, nominal_states, c_nom, coords):
    """Time-varying feedback along a nominal, mirroring regulator()."""
    last = len(Ks) - 1
    if coords == "maximal":
        def control(k, z):
            kk = min(k, last)
            e = tangent_error(z, nominal_states[kk])
            return u_nom[kk] - Ks[kk] @ e
    elif coords == "minimal":
        def control(k, z):
            kk = min(k, last)
            e = system.coord_error(system.minimal_coords(z), c_nom[kk])
            return u_nom[kk] - Ks[kk] @ e
    else:
        raise ValueError(f"unknown coordinate choice {coords!r}")
    return control


# ---------------------------------------------------------------------------
# basin of attraction

@dataclass
class BasinConfig:
    """Grid sweep description: per-axis (label, lo, hi, count) over the
    position coordinates, rest everywhere else."""

    system: str
    coords: str = "maximal"
    axes: tuple = ()
    horizon: float = 25.0
    dt: float = 1e-3
    convergence_radius: float = CONVERGENCE_RADIUS
    blowup_omega: float = BLOWUP_OMEGA
    preset: str = "custom"

    def __post_init__(self):
        _step_count(self.horizon, self.dt)
        for label, lo, hi, count in self.axes:
            if count < 1:
                raise ValueError(f"axis {label!r} needs at least one point")


_BASIN_AXES = {
    ("acrobot", "desk"): (("theta1", 0.0, 2.0 * math.pi, 17),
                          ("theta2", -math.pi, math.pi, 17)),
    ("acrobot", "full"): (("theta1", 0.0, 2.0 * math.pi, 65),
                           ("theta2", -math.pi, math.pi, 65)),
    ("cartpole", "desk"): (("cart", -2.0, 2.0, 17),
                           ("pole", -math.pi, math.pi, 17)),
    ("cartpole", "full"): (("cart", -2.0, 2.0, 65),
                            ("pole", -math.pi, math.pi, 65)),
    ("delta2d", "desk"): (("y", -1.2, 1.2, 9),
                          ("z", -1.4, 1.4, 9)),
    ("delta2d", "full"): (("y", -1.2, 1.2, 33),
                           ("z", -1.4, 1.4, 33)),
}


def basin_config(system, coords="maximal", preset="desk"):
    """Stock sweep configuration for one system at one scale."""
    try:
        axes = _BASIN_AXES[(system, preset)]
    except KeyError:
        raise KeyError(f"no stock basin grid for {system!r} at preset "
                       f"{preset!r}") from None
    dt = 1e-2 if preset == "desk" else 1e-3
    return BasinConfig(system=system, coords=coords, axes=axes, dt=dt,
                       preset=preset)


def _basin_cell(args):
    """One grid cell, self-contained so sweeps can run in any process."""
    name, coords, K, point, cfg = args
    system = make(name)
    n_pos = len(point)
    c0 = system.ref_coords.copy()
    c0[:n_pos] = point
    c0[n_pos:] = 0.0
    try:
        z0 = system.state_from_minimal(c0)
    except (AssemblyFailure, MaxlqrError):
        return point, Outcome("infeasible")
    controller = regulator(system, K, coords)
    _, outcome = simulate_closed_loop(
        system.mech, controller, z0, cfg["horizon"], cfg["dt"],
        error_fn=system.chart_error,
        convergence_radius=cfg["convergence_radius"],
        blowup_omega=cfg["blowup_omega"], record_states=False)
    return point, outcome


def _sweep(fn, items, jobs):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=4))


def basin_of_attraction(cfg, K=None, out_dir=None, jobs=1):
    """Sweep the configured grid and classify every cell.

    Gains are synthesized once (or passed in) and shared by all cells.
    Returns (rows, summary): rows are (point, Outcome) pairs in grid
    order, summary a JSON-ready dict with the config echo and basin
    counts. When out_dir is given, writes basin_<system>_<coords>.csv
    and .json there.
    """
    started = time.perf_counter()
    system = make(cfg.system)
    if K is None:
        K = regulator_gains(system, cfg.coords, cfg.dt)

    # the basin must contain the reference itself
    _, ref_outcome = simulate_closed_loop(
        system.mech, regulator(system, K, cfg.coords), system.reference,
        cfg.horizon, cfg.dt, error_fn=system.chart_error,
        convergence_radius=cfg.convergence_radius,
        blowup_omega=cfg.blowup_omega, record_states=False)
    if ref_outcome.kind != "converged":
        raise RuntimeError(f"reference itself did not converge "
                           f"({ref_outcome.kind}); refusing to sweep")

    grids = [np.linspace(lo, hi, count) for _, lo, hi, count in cfg.axes]
    mesh = [np.array(p) for p in _grid_points(grids)]
    cfg_dict = {"horizon": cfg.horizon, "dt": cfg.dt,
                "convergence_radius": cfg.convergence_radius,
                "blowup_omega": cfg.blowup_omega}
    rows = _sweep(_basin_cell,
                  [(cfg.system, cfg.coords, K, p, cfg_dict) for p in mesh],
                  jobs)

    counts = {"converged": 0, "timeout": 0, "diverged": 0, "infeasible": 0}
    for _, oc in rows:
        counts[oc.kind] += 1
    n_cells = len(rows)
    summary = {
        "config": _config_echo(cfg),
        "counts": counts,
        "cells": n_cells,
        "basin_cells": counts["converged"],
        "basin_fraction": counts["converged"] / n_cells,
    }
    if out_dir is not None:
        stem = os.path.join(out_dir, f"basin_{cfg.system}_{cfg.coords}")
        _write_basin_csv(stem + ".csv", cfg, rows)
        write_json(stem + ".json", summary)
        # wall time lives in its own sidecar so the result files above
        # stay byte-identical across reruns
        write_json(stem + "_timing.json",
                   {"seconds": time.perf_counter() - started})
    return rows, summary


def _grid_points(grids):
    if len(grids) == 1:
        return [(v,) for v in grids[0]]
    rest = _grid_points(grids[1:])
    return [(v, *r) for v in grids[0] for r in rest]


def _write_basin_csv(path, cfg, rows):
    labels = [a[0] for a in cfg.axes]
    with open(path, "w") as f:
        f.write(",".join(labels + ["outcome", "time_to_converge",
                                   "max_omega"]) + "\n")
        for point, oc in rows:
            cells = [repr(float(v)) for v in point]
            cells.append(oc.kind)
            cells.append("" if math.isnan(oc.time) else repr(float(oc.time)))
            cells.append(repr(float(oc.max_omega)))
            f.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# nominal trajectories

TRAJECTORY_FORMAT = "trajectory/1"


def make_open_loop_nominal(mech, u_sequence, z0, dt):
    """Roll the plant open loop; the result is consistent by construction."""
    u_sequence = np.atleast_2d(np.asarray(u_sequence, dtype=float))
    n_steps = u_sequence.shape[0]
    states = [z0]
    mults = []
    z = z0
    for k in range(n_steps):
        z, mult = dyn.step(mech, z, u_sequence[k], dt)
        states.append(z)
        mults.append(mult)
    times = np.arange(n_steps + 1) * dt
    return TrajectoryRecord(times, states, u_sequence.copy(), mults,
                            np.zeros(n_steps), 0.0)


def _state_to_lists(z):
    return {"k": int(z.k), "x": z.x.tolist(), "v": z.v.tolist(),
            "q": z.q.tolist(), "w": z.w.tolist()}


def _state_from_lists(d):
    return MechanismState(d["k"], np.asarray(d["x"], dtype=float),
                          np.asarray(d["v"], dtype=float),
                          np.asarray(d["q"], dtype=float),
                          np.asarray(d["w"], dtype=float))


def save_trajectory(path, record):
    """Write a trajectory file (versioned JSON, repr-exact floats)."""
    payload = {
        "format": TRAJECTORY_FORMAT,
        "times": np.asarray(record.times, dtype=float).tolist(),
        "states": [_state_to_lists(z) for z in record.states],
        "controls": np.asarray(record.controls, dtype=float).tolist(),
        "multipliers": [np.asarray(m.values, dtype=float).tolist()
                        for m in record.multipliers],
        "projections": [np.asarray(m.projection, dtype=float).tolist()
                        for m in record.multipliers],
        "stage_costs": np.asarray(record.stage_costs, dtype=float).tolist(),
        "accumulated_cost": float(record.accumulated_cost),
    }
    write_json(path, payload)


def load_trajectory(path):
    with open(path) as f:
        data = json.load(f)
    if data.get("format") != TRAJECTORY_FORMAT:
        raise InconsistentNominal(
            f"unsupported trajectory format {data.get('format')!r}")
    states = [_state_from_lists(d) for d in data["states"]]
    mults = [Multipliers(np.asarray(v, dtype=float), states[k].k,
                         np.asarray(p, dtype=float))
             for k, (v, p) in enumerate(zip(data["multipliers"],
                                            data["projections"]))]
    return TrajectoryRecord(
        np.asarray(data["times"], dtype=float), states,
        np.asarray(data["controls"], dtype=float), mults,
        np.asarray(data["stage_costs"], dtype=float),
        float(data["accumulated_cost"]))


def validate_nominal(mech, record, dt, tol=1e-8):
    """Check a nominal satisfies the step equations at every transition."""
    n_steps = len(record.controls)
    if len(record.states) != n_steps + 1 or \
            len(record.multipliers) != n_steps:
        raise InconsistentNominal("trajectory lengths are inconsistent")
    for k in range(n_steps):
        r, g = dyn.step_residual(mech, record.states[k],
                                 record.states[k + 1], record.controls[k],
                                 record.multipliers[k].values, dt,
                                 mu=record.multipliers[k].projection)
        worst = max(np.max(np.abs(r)), np.max(np.abs(g)))
        if worst > tol:
            raise InconsistentNominal(
                f"step {k} violates the dynamics by {worst:.3e}")


def swing_nominal(system, horizon=5.0, dt=1e-2, amplitude=2.0,
                  frequency=0.5):
    """Stock open-loop nominal: a sinusoidal drive about the rest pose.

    Used as the tracking target when no external nominal is supplied.
    The drive oscillates about system.swing_coords so the open-loop
    motion stays bounded; from an unstable reference it would tumble.
    """
    n_steps = _step_count(horizon, dt)
    t = np.arange(n_steps) * dt
    u = np.zeros((n_steps, system.mech.n_controls))
    u[:] = system.u_ref
    u[:, 0] += amplitude * np.sin(2.0 * math.pi * frequency * t)
    z0 = system.state_from_minimal(system.swing_coords)
    return make_open_loop_nominal(system.mech, u, z0, dt)


# ---------------------------------------------------------------------------
# perturbed tracking

@dataclass
class TrackingConfig:
    """Perturbed replay description (defaults are the study magnitudes)."""

    system: str = "cartpole"
    runs: int = 50
    noise_sigma: float = 2.0
    friction_k: float = 0.1
    mass_factor_range: tuple = (0.9, 1.1)
    init_jitter_range: tuple = (-0.1, 0.1)
    seed: int = 0
    dt: float = 1e-2
    blowup_omega: float = BLOWUP_OMEGA
    cap_factor: float = 10.0
    preset: str = "custom"

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("need at least one run")
        for lo, hi in (self.mass_factor_range, self.init_jitter_range):
            if lo > hi:
                raise ValueError("perturbation ranges must be ordered")


def tracking_config(system="cartpole", preset="desk", seed=0):
    runs = 50 if preset == "desk" else 1000
    dt = 1e-2 if preset == "desk" else 1e-3
    return TrackingConfig(system=system, runs=runs, seed=seed, dt=dt,
                          preset=preset)


def perturb_mechanism(mech, rng, mass_factor_range=(0.9, 1.1),
                      friction_k=0.1):
    """Scale every body's mass and inertia by independent uniform
    factors and put viscous friction on every joint. Draw order is
    fixed (mass then inertia, body order), so a seeded generator gives
    the same plant every time."""
    lo, hi = mass_factor_range
    bodies = []
    for b in mech.bodies:
        fm = float(rng.uniform(lo, hi))
        fj = float(rng.uniform(lo, hi))
        bodies.append(replace(b, mass=b.mass * fm, inertia=b.inertia * fj))
    joints = [replace(j, friction=friction_k) for j in mech.joints]
    return Mechanism(bodies, joints, mech.gravity)


def _run_draws(cfg, n_min, n_steps, m, run_index):
    """All random draws for one run, from its own pre-split stream.

    The stream depends only on (seed, run index), never on the
    controller, so paired comparisons face identical perturbations.
    """
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed,
                                                        run_index)))
    jitter = rng.uniform(cfg.init_jitter_range[0], cfg.init_jitter_range[1],
                         n_min)
    noise = rng.standard_normal((n_steps, m)) * cfg.noise_sigma
    return rng, jitter, noise


def _tracking_run(args):
    """One perturbed replay; self-contained for process pools."""
    name, coords, Ks, u_nom, state_payload, c_nom, cfg_dict, i = args
    cfg = TrackingConfig(**cfg_dict)
    system = make(name)
    nominal_states = [_state_from_lists(d) for d in state_payload]
    n_steps = len(u_nom)
    m = u_nom.shape[1]

    rng, jitter, noise = _run_draws(cfg, system.n_min, n_steps, m, i)
    plant = perturb_mechanism(system.mech, rng,
                              cfg.mass_factor_range, cfg.friction_k)
    c0 = c_nom[0] + jitter
    z0 = system.state_from_minimal(c0)

    feedback = tracker(system, Ks, u_nom, nominal_states, c_nom, coords)

    def noisy(k, z):
        return feedback(k, z) + noise[k]

    def stage_cost(k, z, u):
        e = system.coord_error(system.minimal_coords(z), c_nom[k])
        du = u - u_nom[k]
        return float(e @ system.Q @ e + du @ system.R @ du)

    rec, outcome = simulate_closed_loop(
        plant, noisy, z0, n_steps * cfg.dt, cfg.dt, error_fn=None,
        blowup_omega=cfg.blowup_omega, cost_fn=stage_cost,
        record_states=False)
    return i, outcome.kind, outcome.reason, rec.stage_costs


def tracking_experiment(cfg, nominal, coords, out_dir=None, jobs=1):
    """Replay a nominal against cfg.runs perturbed plants.

    Returns (per-run rows, aggregate dict). Each row is (index,
    outcome kind, stage-cost array, accumulated cost). Diverged runs
    enter the accumulated-cost aggregate capped at cap_factor times the
    worst completed run and are excluded from the per-step series; the
    aggregate reports their count. When out_dir is given, writes one
    CSV per run plus track_<system>_<coords>.json.
    """
    started = time.perf_counter()
    system = make(cfg.system)
    validate_nominal(system.mech, nominal, cfg.dt)
    Ks, c_nom = tracking_gains(system, nominal, cfg.dt, coords)
    u_nom = np.asarray(nominal.controls, dtype=float)
    state_payload = [_state_to_lists(z) for z in nominal.states]
    cfg_dict = asdict(cfg)
    for key in ("mass_factor_range", "init_jitter_range"):
        cfg_dict[key] = tuple(cfg_dict[key])

    args = [(cfg.system, coords, Ks, u_nom, state_payload, c_nom,
             cfg_dict, i) for i in range(cfg.runs)]
    results = _sweep(_tracking_run, args, jobs)

    rows = []
    for i, kind, reason, costs in sorted(results, key=lambda r: r[0]):
        rows.append((i, kind, costs, float(np.sum(costs))))

    completed = [acc for _, kind, _, acc in rows if kind != "diverged"]
    diverged = [i for i, kind, _, _ in rows if kind == "diverged"]
    if completed:
        cap = cfg.cap_factor * max(completed)
        accumulated = [min(acc, cap) if kind == "diverged" else acc
                       for _, kind, _, acc in rows]
    else:
        accumulated = [acc for _, _, _, acc in rows]

    n_steps = len(u_nom)
    full = np.array([costs for _, kind, costs, _ in rows
                     if kind != "diverged" and len(costs) == n_steps])
    aggregate = {
        "config": _config_echo(cfg),
        "coords": coords,
        "runs": cfg.runs,
        "diverged_runs": diverged,
        "divergence_count": len(diverged),
        "mean_accumulated_cost": float(np.mean(accumulated)),
        "std_accumulated_cost": float(np.std(accumulated)),
        "mean_stage_cost": full.mean(axis=0).tolist() if full.size else [],
        "std_stage_cost": full.std(axis=0).tolist() if full.size else [],
    }
    if out_dir is not None:
        for i, kind, costs, acc in rows:
            path = os.path.join(
                out_dir, f"track_{cfg.system}_{coords}_run{i:03d}.csv")
            _write_run_csv(path, costs)
        write_json(os.path.join(out_dir,
                                f"track_{cfg.system}_{coords}.json"),
                   aggregate)
        # wall time in a sidecar, keeping the results byte-reproducible
        write_json(os.path.join(out_dir,
                                f"track_{cfg.system}_{coords}_timing.json"),
                   {"seconds": time.perf_counter() - started})
    return rows, aggregate


def _write_run_csv(path, stage_costs):
    with open(path, "w") as f:
        f.write("k,stage_cost,accumulated_cost\n")
        total = 0.0
        for k, c in enumerate(stage_costs):
            total += float(c)
            f.write(f"{k},{float(c)!r},{total!r}\n")


# ---------------------------------------------------------------------------
# shared output helpers

def _config_echo(cfg):
    echo = asdict(cfg)
    for key, value in echo.items():
        if isinstance(value, tuple):
            echo[key] = list(value)
        elif isinstance(value, np.ndarray):
            echo[key] = value.tolist()
    if "axes" in echo:
        echo["axes"] = [list(a) for a in echo["axes"]]
    return echo


def write_json(path, obj):
    """Deterministic JSON: sorted keys, repr floats, trailing newline."""
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
