"""Reduced-coordinate companion models of the standard mechanisms.

The chain systems (pendulums, acrobot, cart-poles) get genuinely
independent plants here: their equations of motion are assembled in
joint space from the planar chain kinematics and integrated with RK4,
sharing no code with the constraint-based simulator. The parallel
platform has no convenient closed-form reduction, so its reduced model
wraps the full plant behind the platform chart instead.

The models serve two roles: cross checks of the full simulator against
a second formulation of the same physics, and plants for the
reduced-coordinate LQR baselines used in the controller comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import dynamics as dyn
from . import rotations as rot
from .lqr import infinite_horizon
from .systems import chart_jacobian, make

_G = 9.81
_DOWN = np.array([0.0, -_G])


@dataclass
class MinimalModel:
    """Reduced plant with state [positions, velocities]."""

    name: str
    c_ref: np.ndarray
    u_ref: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    angle_mask: np.ndarray
    rate: Optional[Callable] = None
    stepper: Optional[Callable] = None
    energy: Optional[Callable] = None

    @property
    def n_min(self):
        return self.angle_mask.shape[0]

    @property
    def n_inputs(self):
        return self.u_ref.shape[0]

    def coord_error(self, c, ref=None):
        """Difference from the reference with angle wrapping."""
        ref = self.c_ref if ref is None else ref
        d = np.asarray(c, dtype=float) - np.asarray(ref, dtype=float)
        for i in np.flatnonzero(self.angle_mask):
            d[i] = rot.wrap_angle(d[i])
        return d


class _Chain:
    """Serial rods in the y-z plane, optionally riding on a sliding cart.

    Coordinates are the cart travel (when present) followed by one
    relative hinge angle per rod. Rods hang at zero angle by default;
    up=True measures from the inverted pose instead. Equations of
    motion come from d'Alembert's principle: the mass matrix and
    generalized forces are assembled from the centre-of-mass Jacobians,
    so the only model inputs are the Table of masses, inertias, and
    lengths.
    """

    def __init__(self, masses, inertias, lengths, cart_mass=None,
                 up=False, input_cols=()):
        self.m = [float(v) for v in masses]
        self.J = [float(v) for v in inertias]
        self.l = [float(v) for v in lengths]
        self.cart = None if cart_mass is None else float(cart_mass)
        self.s = -1.0 if up else 1.0
        self.off = 0 if self.cart is None else 1
        self.n = len(self.m) + self.off
        self.B = np.zeros((self.n, len(input_cols)))
        for col, i in enumerate(input_cols):
            self.B[i, col] = 1.0

    def _directions(self, pos):
        phi = np.cumsum(pos[self.off:])
        s = self.s
        dirs = [np.array([s * math.sin(p), -s * math.cos(p)]) for p in phi]
        tang = [np.array([s * math.cos(p), s * math.sin(p)]) for p in phi]
        return phi, dirs, tang

    def rate(self, state, u):
        state = np.asarray(state, dtype=float)
        n, off = self.n, self.off
        pos, vel = state[:n], state[n:]
        _, dirs, tang = self._directions(pos)
        phid = np.cumsum(vel[off:])

        M = np.zeros((n, n))
        tau = self.B @ np.asarray(u, dtype=float).reshape(-1) \
            if self.B.shape[1] else np.zeros(n)
        if off:
            M[0, 0] += self.cart
        for j in range(len(self.m)):
            Jb = np.zeros((2, n))
            bias = np.zeros(2)  # velocity-product part of the COM acceleration
            if off:
                Jb[0, 0] = 1.0
            for k in range(j + 1):
                w = self.l[k] if k < j else 0.5 * self.l[j]
                for i in range(k + 1):
                    Jb[:, off + i] += w * tang[k]
                bias -= w * phid[k] ** 2 * dirs[k]
            spin = np.zeros(n)
            spin[off:off + j + 1] = 1.0  # absolute rate is the partial sum
            M += self.m[j] * Jb.T @ Jb + self.J[j] * np.outer(spin, spin)
            tau += Jb.T @ (self.m[j] * (_DOWN - bias))
        acc = np.linalg.solve(M, tau)
        return np.concatenate([vel, acc])

    def energy(self, state):
        state = np.asarray(state, dtype=float)
        n, off = self.n, self.off
        pos, vel = state[:n], state[n:]
        _, dirs, tang = self._directions(pos)
        phid = np.cumsum(vel[off:])
        tip = np.array([pos[0] if off else 0.0, 0.0])
        tip_v = np.array([vel[0] if off else 0.0, 0.0])
        e = 0.5 * self.cart * vel[0] ** 2 if off else 0.0
        for j in range(len(self.m)):
            com = tip + 0.5 * self.l[j] * dirs[j]
            com_v = tip_v + 0.5 * self.l[j] * phid[j] * tang[j]
            e += 0.5 * self.m[j] * (com_v @ com_v)
            e += 0.5 * self.J[j] * phid[j] ** 2
            e += self.m[j] * _G * com[1]
            tip = tip + self.l[j] * dirs[j]
            tip_v = tip_v + self.l[j] * phid[j] * tang[j]
        return e


def _rk4(rate, state, u, dt):
    k1 = rate(state, u)
    k2 = rate(state + 0.5 * dt * k1, u)
    k3 = rate(state + 0.5 * dt * k2, u)
    k4 = rate(state + dt * k3, u)
    return state + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def minimal_step(model, c, u=None, dt=1e-3):
    """Advance the reduced plant one step (RK4 unless the model carries
    its own step map)."""
    c = np.asarray(c, dtype=float)
    u = model.u_ref if u is None else np.asarray(u, dtype=float)
    if model.stepper is not None:
        return model.stepper(c, u, dt)
    return _rk4(model.rate, c, u, dt)


def linearize_minimal(model, c=None, u=None, dt=1e-3, h=1e-5):
    """State and input Jacobians of the one-step reduced map, by central
    differences at (c, u)."""
    c = model.c_ref if c is None else np.asarray(c, dtype=float)
    u = model.u_ref if u is None else np.asarray(u, dtype=float)
    n, m = c.shape[0], u.shape[0]
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        A[:, k] = (minimal_step(model, c + e, u, dt)
                   - minimal_step(model, c - e, u, dt)) / (2.0 * h)
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        B[:, k] = (minimal_step(model, c, u + e, dt)
                   - minimal_step(model, c, u - e, dt)) / (2.0 * h)
    return A, B


def minimal_gains(model, dt=1e-3, **kwargs):
    """Infinite-horizon LQR for the reduced plant.

    Returns (GainSet, iterations); the gain multiplies the wrapped
    coordinate error. The constraint channel is empty here, so the
    recursion is the standard unconstrained one.
    """
    A, B = linearize_minimal(model, dt=dt)
    n = A.shape[0]
    system = (A, B, np.zeros((n, 0)), np.zeros((0, n)))
    return infinite_horizon(system, model.Q, model.R, **kwargs)


def coordinate_map(system, state):
    """Chart value and tangent Jacobian of a full state: the reduced
    coordinates relative to the system reference, and the matrix taking
    state-tangent perturbations to reduced-coordinate changes."""
    return system.chart_error(state), chart_jacobian(system, state)


def matched_cost_matrix(Q_min, F):
    """Lift reduced weights into the state tangent: F' Q_min F."""
    F = np.asarray(F, dtype=float)
    return F.T @ np.asarray(Q_min, dtype=float) @ F


# ---------------------------------------------------------------------------
# builders, sharing the Table parameters with the full mechanisms

def _pendulum_min():
    ch = _Chain([1.0], [0.084], [1.0])
    return MinimalModel("pendulum", np.zeros(2), np.zeros(0),
                        np.eye(2), np.zeros((0, 0)),
                        np.array([True, False]),
                        rate=ch.rate, energy=ch.energy)


def _double_pendulum_min():
    ch = _Chain([1.0, 1.0], [0.084, 0.334], [1.0, 2.0])
    return MinimalModel("double_pendulum", np.zeros(4), np.zeros(0),
                        np.eye(4), np.zeros((0, 0)),
                        np.array([True, True, False, False]),
                        rate=ch.rate, energy=ch.energy)


def _acrobot_min():
    ch = _Chain([1.0, 1.0], [0.084, 0.334], [1.0, 2.0], input_cols=(1,))
    return MinimalModel("acrobot",
                        np.array([math.pi, 0.0, 0.0, 0.0]), np.zeros(1),
                        np.eye(4), np.eye(1),
                        np.array([True, True, False, False]),
                        rate=ch.rate, energy=ch.energy)


def _cartpole_min():
    ch = _Chain([1.0], [0.084], [1.0], cart_mass=0.5, up=True,
                input_cols=(0,))
    return MinimalModel("cartpole", np.zeros(4), np.zeros(1),
                        np.eye(4), np.eye(1),
                        np.array([False, True, False, False]),
                        rate=ch.rate, energy=ch.energy)


def _triple_cartpole_min():
    ch = _Chain([1.0] * 3, [0.084] * 3, [1.0] * 3, cart_mass=0.5, up=True,
                input_cols=(0,))
    mask = np.zeros(8, dtype=bool)
    mask[1:4] = True
    return MinimalModel("triple_cartpole", np.zeros(8), np.zeros(1),
                        np.diag([10.0, 10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0]),
                        0.1 * np.eye(1), mask,
                        rate=ch.rate, energy=ch.energy)


def _delta2d_min():
    # no closed-form reduction exists for the closed loop; the reduced
    # plant steps the full mechanism behind the platform chart
    full = make("delta2d")

    def stepper(c, u, dt):
        z = full.state_from_minimal(c)
        z1, _ = dyn.step(full.mech, z, u, dt)
        return full.minimal_coords(z1)

    return MinimalModel("delta2d", full.ref_coords.copy(),
                        full.u_ref.copy(), full.Q.copy(), full.R.copy(),
                        full.angle_mask.copy(), stepper=stepper)


_BUILDERS = {
    "pendulum": _pendulum_min,
    "double_pendulum": _double_pendulum_min,
    "acrobot": _acrobot_min,
    "cartpole": _cartpole_min,
    "triple_cartpole": _triple_cartpole_min,
    "delta2d": _delta2d_min,
}


def make_minimal(name):
    try:
        build = _BUILDERS[name]
    except KeyError:
        raise KeyError(f"no reduced model for {name!r}; available: "
                       f"{', '.join(sorted(_BUILDERS))}") from None
    return build()
