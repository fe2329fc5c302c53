"""Linearization of the implicit step around a reference transition.

The step equations d(z_k, z_{k+1}, u_k, lam_k) = 0 define the successor
implicitly. Differentiating them at a reference that satisfies the
equations gives the tangent-space transition model

    dz_{k+1} = A dz_k + B du_k + C dlam_k,   G dz_{k+1} = 0,

where all four matrices come from one factorization of the residual
Jacobian with respect to the successor. G is the constraint Jacobian
at the reference successor, so the pair (A, B, C, G) describes both how
perturbations propagate and which directions stay feasible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .bodies import retract, tangent_error
from .errors import InconsistentNominal, SingularDynamicsJacobian


@dataclass
class LinearizedSystem:
    """Tangent-space model of one step along a reference."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    G: np.ndarray
    dt: float

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def c(self):
        return self.C.shape[1]


def _unpack_multipliers(multipliers, c):
    """Accept a Multipliers record, a (lam, mu) pair, or a bare array."""
    if hasattr(multipliers, "values"):
        lam = np.asarray(multipliers.values, dtype=float).reshape(c)
        mu = multipliers.projection
    elif isinstance(multipliers, tuple):
        lam, mu = multipliers
        lam = np.asarray(lam, dtype=float).reshape(c)
    else:
        lam = np.asarray(multipliers, dtype=float).reshape(c)
        mu = None
    mu = np.zeros(c) if mu is None else np.asarray(mu, dtype=float).reshape(c)
    return lam, mu


def linearize(mech, state, u=None, dt=1e-3, successor=None, multipliers=None,
              tol=1e-8, cond_limit=1e12):
    """Linearize the step map at a reference transition.

    When successor/multipliers are omitted they are computed by stepping
    from the given state, so an equilibrium reference can be passed as
    just (state, u). The reference must satisfy the step equations to
    within tol or InconsistentNominal is raised.
    """
    m = mech.n_controls
    u = np.zeros(m) if u is None else np.asarray(u, dtype=float).reshape(m)
    if successor is None:
        successor, multipliers = dyn.step(mech, state, u, dt)
    if multipliers is None:
        raise InconsistentNominal("reference successor given without its "
                                  "multipliers")
    lam, mu = _unpack_multipliers(multipliers, mech.n_constraints)
    r, g = dyn.step_residual(mech, state, successor, u, lam, dt, mu)
    worst = max(np.max(np.abs(r), initial=0.0), np.max(np.abs(g), initial=0.0))
    if worst > tol:
        raise InconsistentNominal(
            f"reference violates the step equations by {worst:.3e}")
    D0, D1, Du, Dl = dyn.residual_partials(mech, state, successor, u, lam,
                                           dt, mu)
    if np.linalg.cond(D1) > cond_limit:
        raise SingularDynamicsJacobian(
            "residual Jacobian at the successor is numerically singular")
    nt = mech.tangent_dim
    sol = np.linalg.solve(D1, np.hstack([D0, Du, Dl]))
    A = -sol[:nt, :nt]
    B = -sol[:nt, nt:nt + m]
    C = -sol[:nt, nt + m:]
    G = dyn.constraint_jacobian(mech, successor)
    return LinearizedSystem(A, B, C, G, dt)


def linearize_trajectory(mech, states, controls, multipliers, dt, tol=1e-8):
    """Linearize every transition of a nominal trajectory.

    states has N+1 entries; controls and multipliers have N. Returns a
    list of N LinearizedSystem instances.
    """
    n_steps = len(controls)
    if len(states) != n_steps + 1 or len(multipliers) != n_steps:
        raise ValueError("trajectory lengths are inconsistent")
    out = []
    for k in range(n_steps):
        out.append(linearize(mech, states[k], controls[k], dt,
                             successor=states[k + 1],
                             multipliers=multipliers[k], tol=tol))
    return out


def _solve_successor(mech, state0, u, lam, dt, guess, tol=1e-12,
                     max_iters=50):
    """Solve the step equations for the successor with the force
    multipliers held fixed (the constraint rows are dropped), then apply
    the velocity projection at the resulting configuration."""
    nt = mech.tangent_dim
    z1 = guess.copy()
    for _ in range(max_iters):
        r, _ = dyn.step_residual(mech, state0, z1, u, lam, dt)
        if np.max(np.abs(r[:nt])) < tol:
            break
        _, D1, _, _ = dyn.residual_partials(mech, state0, z1, u, lam, dt)
        delta = np.linalg.solve(D1[:nt, :nt], -r[:nt])
        z1 = retract(z1, delta)
    else:
        raise InconsistentNominal("frozen-multiplier successor solve stalled")
    v1, w1, G1, Minv = dyn._preprojection_velocities(
        mech, z1, np.zeros(mech.n_constraints))
    V = dyn._flat_velocity(v1, w1)
    PGt = Minv @ G1.T
    V = V + PGt @ np.linalg.solve(G1 @ PGt, -G1 @ V)
    Vb = V.reshape(mech.n_bodies, 6)
    return type(z1)(z1.k, z1.x, Vb[:, 0:3].copy(), z1.q, Vb[:, 3:6].copy())


def finite_difference_jacobians(mech, state, u=None, dt=1e-3, successor=None,
                                multipliers=None, h=1e-6):
    """Central-difference reference for the linearization.

    Differentiates the successor solution map with the multipliers
    frozen at the reference value, and the constraint values around the
    reference successor. Slow; intended for verification.
    """
    m = mech.n_controls
    u = np.zeros(m) if u is None else np.asarray(u, dtype=float).reshape(m)
    if successor is None:
        successor, multipliers = dyn.step(mech, state, u, dt)
    lam, _ = _unpack_multipliers(multipliers, mech.n_constraints)
    nt = mech.tangent_dim
    c = mech.n_constraints

    def succ_from(s0, uu, ll):
        return _solve_successor(mech, s0, uu, ll, dt, successor)

    A = np.zeros((nt, nt))
    for k in range(nt):
        e = np.zeros(nt)
        e[k] = h
        zp = succ_from(retract(state, e), u, lam)
        zm = succ_from(retract(state, -e), u, lam)
        A[:, k] = (tangent_error(zp, successor)
                   - tangent_error(zm, successor)) / (2 * h)
    B = np.zeros((nt, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        zp = succ_from(state, u + e, lam)
        zm = succ_from(state, u - e, lam)
        B[:, k] = (tangent_error(zp, successor)
                   - tangent_error(zm, successor)) / (2 * h)
    C = np.zeros((nt, c))
    for k in range(c):
        e = np.zeros(c)
        e[k] = h
        zp = succ_from(state, u, lam + e)
        zm = succ_from(state, u, lam - e)
        C[:, k] = (tangent_error(zp, successor)
                   - tangent_error(zm, successor)) / (2 * h)
    G = np.zeros((c, nt))
    for k in range(nt):
        e = np.zeros(nt)
        e[k] = h
        gp = dyn.evaluate_constraints(mech, retract(successor, e))
        gm = dyn.evaluate_constraints(mech, retract(successor, -e))
        G[:, k] = (gp - gm) / (2 * h)
    return A, B, C, G
