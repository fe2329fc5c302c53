"""Tangent-space step models against central differences.

The finite-difference reference re-solves the stepper around the
nominal with frozen force multipliers, which is exactly the map the
analytic model differentiates.
"""

import numpy as np
import pytest

from maxlqr import dynamics as dyn
from maxlqr.bodies import retract, tangent_error
from maxlqr.errors import InconsistentNominal
from maxlqr.linearize import (LinearizedSystem, finite_difference_jacobians,
                              linearize, linearize_trajectory)
from maxlqr.systems import make


def moving_reference(name, c0, u):
    system = make(name)
    z = system.state_from_minimal(np.asarray(c0, dtype=float))
    return system, z, np.asarray(u, dtype=float)


def test_analytic_matches_finite_differences_on_moving_acrobot():
    system, z, u = moving_reference("acrobot", [0.9, -0.4, 0.3, 0.6], [0.5])
    lin = linearize(system.mech, z, u, dt=1e-3)
    A, B, C, G = finite_difference_jacobians(system.mech, z, u, dt=1e-3)
    assert np.max(np.abs(lin.A - A)) < 1e-6
    assert np.max(np.abs(lin.B - B)) < 1e-6
    assert np.max(np.abs(lin.C - C)) < 1e-6
    assert np.max(np.abs(lin.G - G)) < 1e-6


def test_analytic_matches_finite_differences_with_friction():
    system, z, u = moving_reference("cartpole", [0.2, 0.7, -0.5, 0.4], [0.8])
    import dataclasses
    from maxlqr.bodies import Mechanism
    mech = Mechanism(system.mech.bodies,
                     [dataclasses.replace(j, friction=0.3)
                      for j in system.mech.joints], system.mech.gravity)
    lin = linearize(mech, z, u, dt=1e-3)
    A, B, C, G = finite_difference_jacobians(mech, z, u, dt=1e-3)
    assert np.max(np.abs(lin.A - A)) < 1e-6
    assert np.max(np.abs(lin.B - B)) < 1e-6
    assert np.max(np.abs(lin.C - C)) < 1e-6


def test_model_predicts_perturbed_steps():
    # project the multiplier channel onto the feasible response and
    # compare against actually stepping a perturbed state
    system, z, u = moving_reference("acrobot", [0.5, 0.2, -0.3, 0.1], [0.2])
    dt = 1e-2
    z1, _ = dyn.step(system.mech, z, u, dt)
    lin = linearize(system.mech, z, u, dt=dt)
    GC = lin.G @ lin.C
    proj = np.linalg.solve(GC, lin.G)
    rng = np.random.default_rng(2)
    for _ in range(5):
        delta = rng.uniform(-1.0, 1.0, lin.n) * 1e-4
        du = rng.uniform(-1.0, 1.0, lin.m) * 1e-4
        free = lin.A @ delta + lin.B @ du
        predicted = free - lin.C @ (proj @ free)
        zp, _ = dyn.step(system.mech, retract(z, delta), u + du, dt)
        actual = tangent_error(zp, z1)
        assert np.max(np.abs(actual - predicted)) < 1e-6


def test_shapes_and_dt_recorded():
    system = make("cartpole")
    lin = linearize(system.mech, system.reference, system.u_ref, dt=5e-3)
    nt = system.mech.tangent_dim
    c = system.mech.n_constraints
    assert isinstance(lin, LinearizedSystem)
    assert lin.A.shape == (nt, nt)
    assert lin.B.shape == (nt, 1)
    assert lin.C.shape == (nt, c)
    assert lin.G.shape == (c, nt)
    assert lin.n == nt and lin.m == 1 and lin.c == c
    assert lin.dt == 5e-3


def test_multiplier_argument_forms_agree():
    system, z, u = moving_reference("acrobot", [0.4, -0.2, 0.2, 0.3], [0.1])
    z1, mult = dyn.step(system.mech, z, u, 1e-3)
    by_record = linearize(system.mech, z, u, 1e-3, successor=z1,
                          multipliers=mult)
    by_tuple = linearize(system.mech, z, u, 1e-3, successor=z1,
                         multipliers=(mult.values, mult.projection))
    assert np.array_equal(by_record.A, by_tuple.A)
    assert np.array_equal(by_record.C, by_tuple.C)


def test_inconsistent_reference_rejected():
    system = make("acrobot")
    z = system.state_from_minimal(np.array([0.3, 0.1, 0.0, 0.0]))
    z1, mult = dyn.step(system.mech, z, np.zeros(1), 1e-3)
    wrong = retract(z1, np.full(system.mech.tangent_dim, 1e-3))
    with pytest.raises(InconsistentNominal):
        linearize(system.mech, z, np.zeros(1), 1e-3, successor=wrong,
                  multipliers=mult)
    with pytest.raises(InconsistentNominal):
        linearize(system.mech, z, np.zeros(1), 1e-3, successor=z1,
                  multipliers=None)


def test_trajectory_linearization_matches_pointwise_calls():
    system = make("cartpole")
    dt = 1e-2
    z = system.state_from_minimal(np.array([0.1, 0.4, 0.0, -0.2]))
    states, controls, mults = [z], [], []
    rng = np.random.default_rng(8)
    for k in range(5):
        u = rng.uniform(-1.0, 1.0, 1)
        z, mult = dyn.step(system.mech, z, u, dt)
        states.append(z)
        controls.append(u)
        mults.append(mult)
    schedule = linearize_trajectory(system.mech, states, controls, mults, dt)
    assert len(schedule) == 5
    direct = linearize(system.mech, states[2], controls[2], dt,
                       successor=states[3], multipliers=mults[2])
    assert np.array_equal(schedule[2].A, direct.A)
    assert np.array_equal(schedule[2].B, direct.B)
    with pytest.raises(ValueError):
        linearize_trajectory(system.mech, states[:-1], controls, mults, dt)
