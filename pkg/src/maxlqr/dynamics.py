"""Implicit one-step dynamics for constrained mechanisms.

The stepper advances all bodies simultaneously with a midpoint rule:

    x1 = x0 + dt * (v0 + v1) / 2
    q1 = q0 * exp(dt * (w0 + w1) / 2)
    m (v1 - v0) = dt * (m g + F_applied + F_constraint)
    J w1 - J w0 + dt * wm x (J wm) = dt * (T_applied + T_constraint)
    g(z1) = 0

Forces are evaluated at the midpoint configuration. Constraint forces
enter through the transpose of the constraint Jacobian averaged along
the interpolation path between z0 and z1 (three-point Gauss rule), so
the multipliers do no work through the step to rounding accuracy. The
nonlinear system in (v1, w1, lambda) is solved with Newton iterations.

A second stage then projects the velocities onto the constraint-rate
null space at the new configuration,

    M (V+ - V1) = G(z1)^T mu,    G(z1) V+ = 0,

which removes the component of velocity normal to the constraint
manifold. Without it that component is reflected from step to step
(the position update forces G (v0 + v1) = 0, so v1 = -v0 along the
normal), an undamped oscillation that never decays and poisons any
infinite-horizon analysis of the step map. The projection is the
identity on consistent states, so trajectories that start consistent
keep their accuracy order.

Multiplier conventions: position rows carry the world-frame force on
the child body, orientation rows carry the body-frame torque on the
child, and axis/line rows carry the scalar force conjugate to the
constrained direction. The projection impulses mu follow the same row
convention.
"""

from __future__ import annotations

import math

import numpy as np

from . import rotations as rot
from .bodies import Mechanism, MechanismState, Multipliers
from .errors import (AssemblyFailure, InconsistentNominal, NewtonDivergence,
                     SingularKKT, Unactuatable)

_I3 = np.eye(3)

# Gauss-Legendre nodes and weights on [0, 1]; the middle node is also the
# midpoint configuration used for applied forces.
_GAUSS_S = (0.5 - math.sqrt(15.0) / 10.0, 0.5, 0.5 + math.sqrt(15.0) / 10.0)
_GAUSS_W = (5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0)


def _rotations(q):
    nb = q.shape[0]
    out = np.empty((nb, 3, 3))
    for i in range(nb):
        out[i] = rot.quat_to_rot(q[i])
    return out


def _cross(a, b):
    """Cross product of two 3-vectors without the ufunc dispatch cost."""
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


def _inverse_mass(mech):
    """Block-diagonal inverse of the mass matrix, (6 nb, 6 nb)."""
    return mech.inverse_mass


def _flat_velocity(v, w):
    """Stack per-body velocities into the (6 nb,) layout [v, w] per body."""
    return np.concatenate([np.concatenate([v[i], w[i]])
                           for i in range(v.shape[0])])


def _lock_angle(joint, q, R):
    """Relative-orientation error psi and the rotations entering its rows."""
    p, c = joint.parent, joint.child
    q_ref = joint.rel_rotation
    if p >= 0:
        q_rel = rot.quat_mul(rot.quat_conj(q[p]), q[c])
    else:
        q_rel = q[c]
    psi = rot.quat_log(rot.quat_mul(rot.quat_conj(q_ref), q_rel))
    return psi


def _constraint_eval(mech, x, q, R, want_blocks=False):
    """Constraint values g and optionally the config-tangent Jacobian.

    The Jacobian columns follow the per-body layout [dx (3), dtheta (3)].
    """
    c = mech.n_constraints
    nb = mech.n_bodies
    g = np.zeros(c)
    G = np.zeros((c, 6 * nb)) if want_blocks else None
    for jidx, joint in enumerate(mech.joints):
        r0 = mech.row_offsets[jidx]
        p, ch = joint.parent, joint.child
        has_p = p >= 0
        Rc = R[ch]
        Rp = R[p] if has_p else _I3
        rp = joint.anchor_parent
        rc = joint.anchor_child
        h_rp, h_rc = joint.anchor_hats
        kind = joint.kind

        if kind in ("pin", "revolute"):
            a_c = x[ch] + Rc @ rc
            a_p = (x[p] + Rp @ rp) if has_p else rp
            g[r0:r0 + 3] = a_c - a_p
            if want_blocks:
                G[r0:r0 + 3, 6 * ch:6 * ch + 3] = _I3
                G[r0:r0 + 3, 6 * ch + 3:6 * ch + 6] = -Rc @ h_rc
                if has_p:
                    G[r0:r0 + 3, 6 * p:6 * p + 3] = -_I3
                    G[r0:r0 + 3, 6 * p + 3:6 * p + 6] = Rp @ h_rp
            if kind == "revolute":
                bc = joint.axis_child
                h_bc = joint.axis_child_hat
                zw = Rc @ bc
                u, w = joint.axis_complement
                h_comp = joint.complement_hats
                for i, n in enumerate((u, w)):
                    yn = Rp @ n
                    g[r0 + 3 + i] = yn @ zw
                    if want_blocks:
                        G[r0 + 3 + i, 6 * ch + 3:6 * ch + 6] = \
                            -(yn @ Rc) @ h_bc
                        if has_p:
                            G[r0 + 3 + i, 6 * p + 3:6 * p + 6] = \
                                -(zw @ Rp) @ h_comp[i]

        elif kind in ("prismatic", "fixed_orientation"):
            psi = _lock_angle(joint, q, R)
            g[r0:r0 + 3] = psi
            if want_blocks:
                Jr_inv = rot.so3_jac_right_inv(psi)
                G[r0:r0 + 3, 6 * ch + 3:6 * ch + 6] = Jr_inv
                if has_p:
                    R_ref = rot.quat_to_rot(joint.rel_rotation)
                    G[r0:r0 + 3, 6 * p + 3:6 * p + 6] = -Jr_inv.T @ R_ref.T
            if kind == "prismatic":
                a_c = x[ch] + Rc @ rc
                a_p = (x[p] + Rp @ rp) if has_p else rp
                delta = a_c - a_p
                u, w = joint.axis_complement
                h_comp = joint.complement_hats
                for i, n in enumerate((u, w)):
                    yn = Rp @ n
                    g[r0 + 3 + i] = yn @ delta
                    if want_blocks:
                        G[r0 + 3 + i, 6 * ch:6 * ch + 3] = yn
                        G[r0 + 3 + i, 6 * ch + 3:6 * ch + 6] = \
                            -(yn @ Rc) @ h_rc
                        if has_p:
                            G[r0 + 3 + i, 6 * p:6 * p + 3] = -yn
                            G[r0 + 3 + i, 6 * p + 3:6 * p + 6] = \
                                -(delta @ Rp) @ h_comp[i] \
                                + (yn @ Rp) @ h_rp
    return g, G


def _wrench_hessian(mech, x, q, R, lam):
    """Derivative of the constraint wrench G(z)' lam with respect to the
    configuration tangent. Rows and columns use the [force; torque] and
    [dx; dtheta] per-body layout of the config tangent.

    The orientation-lock blocks truncate the log-map curvature at second
    order in the lock violation, which vanishes on constraint-satisfying
    paths.
    """
    nb = mech.n_bodies
    H = np.zeros((6 * nb, 6 * nb))
    for jidx, joint in enumerate(mech.joints):
        r0 = mech.row_offsets[jidx]
        p, ch = joint.parent, joint.child
        has_p = p >= 0
        Rc = R[ch]
        Rp = R[p] if has_p else _I3
        rp = joint.anchor_parent
        rc = joint.anchor_child
        h_rp, h_rc = joint.anchor_hats
        kind = joint.kind
        fc, tc = 6 * ch, 6 * ch + 3
        if has_p:
            fp, tp = 6 * p, 6 * p + 3
        lj = lam[r0:r0 + joint.rows]
        if not lj.any():
            continue

        if kind in ("pin", "revolute"):
            lp = lj[0:3]
            H[tc:tc + 3, tc:tc + 3] += h_rc @ rot.hat(Rc.T @ lp)
            if has_p:
                H[tp:tp + 3, tp:tp + 3] -= h_rp @ rot.hat(Rp.T @ lp)
            if kind == "revolute":
                u, w = joint.axis_complement
                nbar = lj[3] * u + lj[4] * w
                bc = joint.axis_child
                h_bc = joint.axis_child_hat
                RcTRp = Rc.T @ Rp
                H[tc:tc + 3, tc:tc + 3] += h_bc @ rot.hat(RcTRp @ nbar)
                if has_p:
                    blk = h_bc @ RcTRp @ rot.hat(nbar)
                    H[tc:tc + 3, tp:tp + 3] += -blk
                    H[tp:tp + 3, tp:tp + 3] += \
                        rot.hat(nbar) @ rot.hat(RcTRp.T @ bc)
                    H[tp:tp + 3, tc:tc + 3] += \
                        -rot.hat(nbar) @ RcTRp.T @ h_bc

        elif kind in ("prismatic", "fixed_orientation"):
            mu = lj[0:3]
            psi = _lock_angle(joint, q, R)
            Jr_inv = rot.so3_jac_right_inv(psi)
            hx_mu = rot.hat(mu)
            curv = rot.hat(_cross(psi, mu)) + rot.hat(psi) @ hx_mu
            dA = 0.5 * hx_mu - curv / 12.0
            d_psi_c = Jr_inv
            H[tc:tc + 3, tc:tc + 3] += dA @ d_psi_c
            if has_p:
                R_ref = rot.quat_to_rot(joint.rel_rotation)
                d_psi_p = -Jr_inv.T @ R_ref.T
                dB = -0.5 * hx_mu - curv / 12.0
                H[tc:tc + 3, tp:tp + 3] += dA @ d_psi_p
                H[tp:tp + 3, tc:tc + 3] += -R_ref @ dB @ d_psi_c
                H[tp:tp + 3, tp:tp + 3] += -R_ref @ dB @ d_psi_p
            if kind == "prismatic":
                u, w = joint.axis_complement
                nbar = lj[3] * u + lj[4] * w
                hx_n = rot.hat(nbar)
                a_c = x[ch] + Rc @ rc
                a_p = (x[p] + Rp @ rp) if has_p else rp
                delta = a_c - a_p
                RcTRpn = Rc.T @ (Rp @ nbar)
                H[tc:tc + 3, tc:tc + 3] += h_rc @ rot.hat(RcTRpn)
                if has_p:
                    H[fc:fc + 3, tp:tp + 3] += -Rp @ hx_n
                    H[fp:fp + 3, tp:tp + 3] += Rp @ hx_n
                    H[tc:tc + 3, tp:tp + 3] += \
                        -h_rc @ Rc.T @ Rp @ hx_n
                    H[tp:tp + 3, tp:tp + 3] += \
                        hx_n @ (rot.hat(Rp.T @ delta) + h_rp)
                    H[tp:tp + 3, tc:tc + 3] += -hx_n @ Rp.T @ Rc @ h_rc
                    H[tp:tp + 3, fc:fc + 3] += hx_n @ Rp.T
                    H[tp:tp + 3, fp:fp + 3] += -hx_n @ Rp.T
    return H


def _applied_wrench(mech, q, R, v, w, u):
    """World forces and body torques from actuation and joint friction,
    evaluated at the given configuration and velocities."""
    nb = mech.n_bodies
    F = np.zeros((nb, 3))
    T = np.zeros((nb, 3))
    ui = 0
    for joint in mech.joints:
        p, ch = joint.parent, joint.child
        has_p = p >= 0
        Rc = R[ch]
        Rp = R[p] if has_p else _I3
        alpha = joint.axis
        control = 0.0
        if joint.actuated:
            control = u[ui]
            ui += 1
        if alpha is None:
            continue
        if joint.kind == "prismatic":
            ahat = Rp @ alpha
            wc = Rc @ _cross(w[ch], joint.anchor_child)
            rel = v[ch] + wc
            if has_p:
                rel = rel - v[p] - Rp @ _cross(w[p], joint.anchor_parent)
            rate = ahat @ rel
            f = control - joint.friction * rate
            if f != 0.0:
                F[ch] += f * ahat
                T[ch] += f * _cross(joint.anchor_child, Rc.T @ ahat)
                if has_p:
                    F[p] -= f * ahat
                    T[p] -= f * _cross(joint.anchor_parent, alpha)
        else:
            bm = Rc.T @ (Rp @ alpha)
            rate = bm @ w[ch]
            if has_p:
                rate -= alpha @ w[p]
            t = control - joint.friction * rate
            if t != 0.0:
                T[ch] += t * bm
                if has_p:
                    T[p] -= t * alpha
    return F, T


def _applied_partials(mech, q, R, v, w, u):
    """Partials of the applied wrench with respect to the configuration
    tangent, the velocities, and the controls, all at the evaluation
    frame. Row layout matches _wrench_hessian."""
    nb = mech.n_bodies
    m = mech.n_controls
    Dcfg = np.zeros((6 * nb, 6 * nb))
    Dvel = np.zeros((6 * nb, 6 * nb))
    Du = np.zeros((6 * nb, m))
    ui = 0
    for joint in mech.joints:
        p, ch = joint.parent, joint.child
        has_p = p >= 0
        Rc = R[ch]
        Rp = R[p] if has_p else _I3
        alpha = joint.axis
        col = None
        control = 0.0
        if joint.actuated:
            col = ui
            control = u[ui]
            ui += 1
        if alpha is None:
            continue
        k = joint.friction
        fc, tc = 6 * ch, 6 * ch + 3
        if has_p:
            fp, tp = 6 * p, 6 * p + 3
        ha = joint.axis_hat

        if joint.kind == "prismatic":
            rc = joint.anchor_child
            rp = joint.anchor_parent
            h_rp, h_rc = joint.anchor_hats
            ahat = Rp @ alpha
            RcT_a = Rc.T @ ahat
            ec = _cross(rc, RcT_a)
            wc = Rc @ _cross(w[ch], rc)
            rel = v[ch] + wc
            if has_p:
                rel = rel - v[p] - Rp @ _cross(w[p], rp)
            rate = ahat @ rel
            f = control - k * rate
            if col is not None:
                Du[fc:fc + 3, col] = ahat
                Du[tc:tc + 3, col] = ec
                if has_p:
                    Du[fp:fp + 3, col] = -ahat
                    Du[tp:tp + 3, col] = -_cross(rp, alpha)
            if k > 0.0:
                # rate partials (rows)
                ds_vc = ahat
                ds_wc = -(ahat @ Rc) @ h_rc
                ds_tc = -(ahat @ Rc) @ rot.hat(_cross(w[ch], rc))
                if has_p:
                    ds_vp = -ahat
                    ds_wp = (ahat @ Rp) @ h_rp
                    ds_tp = (ahat @ Rp) @ rot.hat(_cross(w[p], rp)) \
                        - (rel @ Rp) @ ha
                # force/torque = f * direction; df = -k * ds
                for rows, direction in ((slice(fc, fc + 3), ahat),
                                        (slice(tc, tc + 3), ec)):
                    Dvel[rows, fc:fc + 3] += -k * np.outer(direction, ds_vc)
                    Dvel[rows, tc:tc + 3] += -k * np.outer(direction, ds_wc)
                    Dcfg[rows, tc:tc + 3] += -k * np.outer(direction, ds_tc)
                    if has_p:
                        Dvel[rows, fp:fp + 3] += -k * np.outer(direction, ds_vp)
                        Dvel[rows, tp:tp + 3] += -k * np.outer(direction, ds_wp)
                        Dcfg[rows, tp:tp + 3] += -k * np.outer(direction, ds_tp)
                if has_p:
                    ep = -_cross(rp, alpha)
                    for rows, direction in ((slice(fp, fp + 3), -ahat),
                                            (slice(tp, tp + 3), ep)):
                        Dvel[rows, fc:fc + 3] += -k * np.outer(direction, ds_vc)
                        Dvel[rows, tc:tc + 3] += -k * np.outer(direction, ds_wc)
                        Dcfg[rows, tc:tc + 3] += -k * np.outer(direction, ds_tc)
                        Dvel[rows, fp:fp + 3] += -k * np.outer(direction, ds_vp)
                        Dvel[rows, tp:tp + 3] += -k * np.outer(direction, ds_wp)
                        Dcfg[rows, tp:tp + 3] += -k * np.outer(direction, ds_tp)
            # direction swing with the frames, scaled by the current force
            if f != 0.0:
                Dcfg[tc:tc + 3, tc:tc + 3] += f * h_rc @ rot.hat(RcT_a)
                if has_p:
                    dW_tp = -Rp @ ha
                    Dcfg[fc:fc + 3, tp:tp + 3] += f * dW_tp
                    Dcfg[fp:fp + 3, tp:tp + 3] += -f * dW_tp
                    Dcfg[tc:tc + 3, tp:tp + 3] += \
                        f * h_rc @ Rc.T @ dW_tp

        else:
            # torque pair about the (possibly actuated, possibly damped) axis
            bm = Rc.T @ (Rp @ alpha)
            rate = bm @ w[ch]
            if has_p:
                rate -= alpha @ w[p]
            t = control - k * rate
            if col is not None:
                Du[tc:tc + 3, col] = bm
                if has_p:
                    Du[tp:tp + 3, col] = -alpha
            if k > 0.0:
                ds_wc = bm
                ds_tc = (w[ch] @ rot.hat(bm)).copy()
                if has_p:
                    ds_wp = -alpha
                    ds_tp = -(w[ch] @ Rc.T @ Rp) @ ha
                Dvel[tc:tc + 3, tc:tc + 3] += -k * np.outer(bm, ds_wc)
                Dcfg[tc:tc + 3, tc:tc + 3] += -k * np.outer(bm, ds_tc)
                if has_p:
                    Dvel[tc:tc + 3, tp:tp + 3] += -k * np.outer(bm, ds_wp)
                    Dcfg[tc:tc + 3, tp:tp + 3] += -k * np.outer(bm, ds_tp)
                    Dvel[tp:tp + 3, tc:tc + 3] += k * np.outer(alpha, ds_wc)
                    Dcfg[tp:tp + 3, tc:tc + 3] += k * np.outer(alpha, ds_tc)
                    Dvel[tp:tp + 3, tp:tp + 3] += k * np.outer(alpha, ds_wp)
                    Dcfg[tp:tp + 3, tp:tp + 3] += k * np.outer(alpha, ds_tp)
            if t != 0.0:
                Dcfg[tc:tc + 3, tc:tc + 3] += t * rot.hat(bm)
                if has_p:
                    Dcfg[tc:tc + 3, tp:tp + 3] += -t * Rc.T @ Rp @ ha
    return Dcfg, Dvel, Du


def _actuation_matrix(mech, q, R):
    """Wrench per unit control at a static configuration, (6 nb, m)."""
    m = mech.n_controls
    _, _, Du = _applied_partials(mech, q, R, np.zeros_like(q[:, :3]),
                                 np.zeros_like(q[:, :3]),
                                 np.zeros(m))
    return Du


def evaluate_constraints(mech, state):
    """Stacked joint constraint values at the given state."""
    R = _rotations(state.q)
    g, _ = _constraint_eval(mech, state.x, state.q, R)
    return g


def constraint_jacobian(mech, state):
    """Constraint Jacobian in the full state tangent, (c, 12 nb).

    Velocity columns are zero; position/attitude columns follow the
    per-body tangent layout [dx, dv, dtheta, dw].
    """
    nb = mech.n_bodies
    R = _rotations(state.q)
    _, G6 = _constraint_eval(mech, state.x, state.q, R, want_blocks=True)
    G = np.zeros((mech.n_constraints, 12 * nb))
    for b in range(nb):
        G[:, 12 * b:12 * b + 3] = G6[:, 6 * b:6 * b + 3]
        G[:, 12 * b + 6:12 * b + 9] = G6[:, 6 * b + 3:6 * b + 6]
    return G


def total_energy(mech, state):
    """Kinetic plus gravitational potential energy."""
    e = 0.0
    for i, body in enumerate(mech.bodies):
        e += 0.5 * body.mass * state.v[i] @ state.v[i]
        e += 0.5 * state.w[i] @ (body.inertia @ state.w[i])
        e -= body.mass * (mech.gravity @ state.x[i])
    return e


def gravity_compensation(mech, state, tol=1e-8):
    """Controls and multipliers that hold the given pose statically.

    Solves the force balance m g + A u + G' lam = 0 in least squares and
    raises Unactuatable when no combination balances gravity.
    """
    nb = mech.n_bodies
    R = _rotations(state.q)
    g, G6 = _constraint_eval(mech, state.x, state.q, R, want_blocks=True)
    if np.max(np.abs(g), initial=0.0) > 1e-6:
        raise InconsistentNominal(
            f"pose violates constraints, |g| = {np.max(np.abs(g)):.3e}")
    Au = _actuation_matrix(mech, state.q, R)
    rhs = np.zeros(6 * nb)
    for b in range(nb):
        rhs[6 * b:6 * b + 3] = -mech.bodies[b].mass * mech.gravity
    M = np.hstack([Au, G6.T])
    sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    resid = M @ sol - rhs
    if np.max(np.abs(resid)) > tol * (1.0 + np.max(np.abs(rhs))):
        raise Unactuatable(
            f"static balance residual {np.max(np.abs(resid)):.3e}")
    m = mech.n_controls
    return sol[:m], sol[m:]


def project_to_constraints(mech, state, tol=1e-12, max_iters=50):
    """Minimally correct positions and attitudes so that g(z) = 0."""
    out = state.copy()
    for _ in range(max_iters):
        R = _rotations(out.q)
        g, G6 = _constraint_eval(mech, out.x, out.q, R, want_blocks=True)
        if np.max(np.abs(g), initial=0.0) < tol:
            return out
        step, *_ = np.linalg.lstsq(G6, -g, rcond=None)
        nb = mech.n_bodies
        for b in range(nb):
            out.x[b] += step[6 * b:6 * b + 3]
            out.q[b] = rot.quat_mul(out.q[b],
                                    rot.quat_exp(step[6 * b + 3:6 * b + 6]))
    raise AssemblyFailure(
        f"constraint projection stalled at |g| = {np.max(np.abs(g)):.3e}")


def project_velocities(mech, state):
    """Minimally correct velocities so they are constraint-consistent."""
    out = state.copy()
    nb = mech.n_bodies
    R = _rotations(out.q)
    _, G6 = _constraint_eval(mech, out.x, out.q, R, want_blocks=True)
    V = np.zeros(6 * nb)
    for b in range(nb):
        V[6 * b:6 * b + 3] = out.v[b]
        V[6 * b + 3:6 * b + 6] = out.w[b]
    gdot = G6 @ V
    corr, *_ = np.linalg.lstsq(G6, gdot, rcond=None)
    V -= corr
    for b in range(nb):
        out.v[b] = V[6 * b:6 * b + 3]
        out.w[b] = V[6 * b + 3:6 * b + 6]
    return out


class _Frames:
    """Per-iteration kinematic quantities shared by residual and Jacobian."""

    __slots__ = ("v1", "w1", "vm", "wm", "phi", "x1", "q1", "R1",
                 "node_x", "node_q", "node_R", "qm", "Rm")

    def __init__(self, mech, st0, v1, w1, dt):
        nb = mech.n_bodies
        self.v1 = v1
        self.w1 = w1
        self.vm = 0.5 * (st0.v + v1)
        self.wm = 0.5 * (st0.w + w1)
        self.phi = dt * self.wm
        self.x1 = st0.x + dt * self.vm
        q1 = np.empty((nb, 4))
        for i in range(nb):
            q1[i] = rot.quat_normalize(
                rot.quat_mul(st0.q[i], rot.quat_exp(self.phi[i])))
        self.q1 = q1
        self.R1 = _rotations(q1)
        self.node_x = []
        self.node_q = []
        self.node_R = []
        for s in _GAUSS_S:
            xs = st0.x + s * dt * self.vm
            qs = np.empty((nb, 4))
            for i in range(nb):
                qs[i] = rot.quat_mul(st0.q[i], rot.quat_exp(s * self.phi[i]))
            self.node_x.append(xs)
            self.node_q.append(qs)
            self.node_R.append(_rotations(qs))
        self.qm = self.node_q[1]
        self.Rm = self.node_R[1]


def _momentum_residual(mech, st0, fr, lam, u, dt, Gbar6):
    """Velocity-level residual rows [linear; angular] per body, (6 nb,)."""
    nb = mech.n_bodies
    F, T = _applied_wrench(mech, fr.qm, fr.Rm, fr.vm, fr.wm, u)
    wrench = Gbar6.T @ lam
    r = np.empty(6 * nb)
    for i, body in enumerate(mech.bodies):
        J = body.inertia
        r[6 * i:6 * i + 3] = (body.mass * (fr.v1[i] - st0.v[i])
                              - dt * (body.mass * mech.gravity + F[i])
                              - dt * wrench[6 * i:6 * i + 3])
        r[6 * i + 3:6 * i + 6] = (J @ fr.w1[i] - J @ st0.w[i]
                                  + dt * (_cross(fr.wm[i], J @ fr.wm[i])
                                          - T[i])
                                  - dt * wrench[6 * i + 3:6 * i + 6])
    return r


def _path_jacobian(mech, fr):
    """Gauss average of the constraint Jacobian along the step path."""
    Gbar = None
    for k in range(3):
        _, Gs = _constraint_eval(mech, fr.node_x[k], fr.node_q[k],
                                 fr.node_R[k], want_blocks=True)
        Gbar = _GAUSS_W[k] * Gs if Gbar is None else Gbar + _GAUSS_W[k] * Gs
    return Gbar


def _newton_matrix(mech, st0, fr, lam, u, dt, Gbar6, G1):
    """Jacobian of the reduced residual with respect to (v1, w1, lambda).

    Uses the midpoint node for the constraint-force curvature, which
    keeps the update cheap; the converged answer only depends on the
    exact residual.
    """
    nb = mech.n_bodies
    nv = 6 * nb
    c = mech.n_constraints
    J = np.zeros((nv + c, nv + c))
    # chain from (v1, w1) to the midpoint configuration tangent
    ch_x = 0.25 * dt
    ch_T = [0.25 * dt * rot.so3_jac_right(0.5 * fr.phi[i]) for i in range(nb)]
    Dcfg, Dvel, _ = _applied_partials(mech, fr.qm, fr.Rm, fr.vm, fr.wm, u)
    H = _wrench_hessian(mech, fr.node_x[1], fr.node_q[1], fr.node_R[1], lam)
    W = Dcfg + H  # both act through the midpoint configuration
    for bi in range(nb):
        body = mech.bodies[bi]
        Jb = body.inertia
        rows_f = slice(6 * bi, 6 * bi + 3)
        rows_t = slice(6 * bi + 3, 6 * bi + 6)
        J[rows_f, 6 * bi:6 * bi + 3] += body.mass * _I3
        gyro = rot.hat(fr.wm[bi]) @ Jb - rot.hat(Jb @ fr.wm[bi])
        J[rows_t, 6 * bi + 3:6 * bi + 6] += Jb + 0.5 * dt * gyro
        for bj in range(nb):
            cols_v = slice(6 * bj, 6 * bj + 3)
            cols_w = slice(6 * bj + 3, 6 * bj + 6)
            blk_fx = W[rows_f, 6 * bj:6 * bj + 3]
            blk_ft = W[rows_f, 6 * bj + 3:6 * bj + 6]
            blk_tx = W[rows_t, 6 * bj:6 * bj + 3]
            blk_tt = W[rows_t, 6 * bj + 3:6 * bj + 6]
            J[rows_f, cols_v] += -dt * (blk_fx * ch_x
                                        + 0.5 * Dvel[rows_f, 6 * bj:6 * bj + 3])
            J[rows_f, cols_w] += -dt * (blk_ft @ ch_T[bj]
                                        + 0.5 * Dvel[rows_f, 6 * bj + 3:6 * bj + 6])
            J[rows_t, cols_v] += -dt * (blk_tx * ch_x
                                        + 0.5 * Dvel[rows_t, 6 * bj:6 * bj + 3])
            J[rows_t, cols_w] += -dt * (blk_tt @ ch_T[bj]
                                        + 0.5 * Dvel[rows_t, 6 * bj + 3:6 * bj + 6])
    J[:nv, nv:] = -dt * Gbar6.T
    # constraint rows: g(z1) through the successor configuration
    for bj in range(nb):
        J[nv:, 6 * bj:6 * bj + 3] = 0.5 * dt * G1[:, 6 * bj:6 * bj + 3]
        J[nv:, 6 * bj + 3:6 * bj + 6] = \
            0.5 * dt * G1[:, 6 * bj + 3:6 * bj + 6] @ rot.so3_jac_right(fr.phi[bj])
    return J


def step(mech, state, u=None, dt=1e-3, tol=1e-11, max_iters=100):
    """Advance the mechanism one step, returning the next state and the
    constraint multipliers that acted through the step."""
    nb = mech.n_bodies
    nv = 6 * nb
    c = mech.n_constraints
    m = mech.n_controls
    if u is None:
        u = np.zeros(m)
    u = np.asarray(u, dtype=float).reshape(m)
    v1 = state.v.copy()
    w1 = state.w.copy()
    lam = np.zeros(c)
    fr = None
    for _ in range(max_iters):
        fr = _Frames(mech, state, v1, w1, dt)
        Gbar6 = _path_jacobian(mech, fr)
        g1, G1 = _constraint_eval(mech, fr.x1, fr.q1, fr.R1, want_blocks=True)
        r = _momentum_residual(mech, state, fr, lam, u, dt, Gbar6)
        res = max(np.max(np.abs(r), initial=0.0),
                  np.max(np.abs(g1), initial=0.0))
        if not np.isfinite(res):
            raise NewtonDivergence("non-finite residual in implicit step")
        if res < tol:
            break
        J = _newton_matrix(mech, state, fr, lam, u, dt, Gbar6, G1)
        rhs = np.concatenate([r, g1])
        # impulse/violation scaling keeps the system well conditioned
        J[:, nv:] /= dt
        J[nv:, :] /= dt
        rhs[nv:] /= dt
        try:
            delta = np.linalg.solve(J, -rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularKKT(str(exc)) from None
        check = np.max(np.abs(J @ delta + rhs))
        if not np.isfinite(check) or check > 1e-6 * (1.0 + np.max(np.abs(rhs))):
            raise SingularKKT(
                f"step KKT solve inaccurate, residual {check:.3e}")
        dl = delta[nv:] / dt
        dV = delta[:nv].reshape(nb, 6)
        v1 = v1 + dV[:, 0:3]
        w1 = w1 + dV[:, 3:6]
        lam = lam + dl
    else:
        raise NewtonDivergence(
            f"implicit step stalled at residual {res:.3e} after "
            f"{max_iters} iterations")
    # velocity projection at the new configuration
    Minv = _inverse_mass(mech)
    V = _flat_velocity(v1, w1)
    PGt = Minv @ G1.T
    try:
        mu = np.linalg.solve(G1 @ PGt, -G1 @ V)
    except np.linalg.LinAlgError as exc:
        raise SingularKKT(str(exc)) from None
    V = V + PGt @ mu
    Vb = V.reshape(nb, 6)
    nxt = MechanismState(state.k + 1, fr.x1, Vb[:, 0:3].copy(), fr.q1,
                         Vb[:, 3:6].copy())
    return nxt, Multipliers(lam, state.k, mu)


def _preprojection_velocities(mech, state1, mu):
    """Undo the velocity projection: the stage-one velocities that the
    momentum balance acts on, given the stored state and its impulses."""
    R1 = _rotations(state1.q)
    _, G1 = _constraint_eval(mech, state1.x, state1.q, R1, want_blocks=True)
    Minv = _inverse_mass(mech)
    corr = (Minv @ G1.T @ mu).reshape(mech.n_bodies, 6)
    return state1.v - corr[:, 0:3], state1.w - corr[:, 3:6], G1, Minv


def step_residual(mech, state0, state1, u, lam, dt, mu=None):
    """Full residual of the step equations for a given transition,
    including the position/attitude reconstruction rows and the
    velocity-projection rows. Returns the (12 nb + c,) dynamics
    residual and the (c,) constraint values at state1.
    """
    nb = mech.n_bodies
    m = mech.n_controls
    c = mech.n_constraints
    u = np.zeros(m) if u is None else np.asarray(u, dtype=float).reshape(m)
    mu = np.zeros(c) if mu is None else np.asarray(mu, dtype=float).reshape(c)
    v1, w1, G1, _ = _preprojection_velocities(mech, state1, mu)
    vm = 0.5 * (state0.v + v1)
    wm = 0.5 * (state0.w + w1)
    phi = np.empty((nb, 3))
    for i in range(nb):
        phi[i] = rot.quat_log(
            rot.quat_mul(rot.quat_conj(state0.q[i]), state1.q[i]))
    fr = _interp_frames(mech, state0, state1, phi)
    Gbar6 = None
    for k in range(3):
        _, Gs = _constraint_eval(mech, fr.node_x[k], fr.node_q[k],
                                 fr.node_R[k], want_blocks=True)
        Gbar6 = _GAUSS_W[k] * Gs if Gbar6 is None else Gbar6 + _GAUSS_W[k] * Gs
    F, T = _applied_wrench(mech, fr.qm, fr.Rm, vm, wm, u)
    wrench = Gbar6.T @ lam
    r = np.empty(12 * nb + c)
    for i, body in enumerate(mech.bodies):
        J = body.inertia
        s = 12 * i
        r[s:s + 3] = state1.x[i] - state0.x[i] - dt * vm[i]
        r[s + 3:s + 6] = (body.mass * (v1[i] - state0.v[i])
                          - dt * (body.mass * mech.gravity + F[i])
                          - dt * wrench[6 * i:6 * i + 3])
        r[s + 6:s + 9] = phi[i] - dt * wm[i]
        r[s + 9:s + 12] = (J @ w1[i] - J @ state0.w[i]
                           + dt * (_cross(wm[i], J @ wm[i]) - T[i])
                           - dt * wrench[6 * i + 3:6 * i + 6])
    r[12 * nb:] = G1 @ _flat_velocity(state1.v, state1.w)
    R1 = _rotations(state1.q)
    g1, _ = _constraint_eval(mech, state1.x, state1.q, R1)
    return r, g1


class _PathFrames:
    __slots__ = ("node_x", "node_q", "node_R", "qm", "Rm")


def _interp_frames(mech, state0, state1, phi):
    """Gauss-node configurations along the interpolation path between two
    arbitrary states (positions linear, attitudes geodesic)."""
    nb = mech.n_bodies
    fr = _PathFrames()
    fr.node_x = []
    fr.node_q = []
    fr.node_R = []
    for s in _GAUSS_S:
        xs = (1.0 - s) * state0.x + s * state1.x
        qs = np.empty((nb, 4))
        for i in range(nb):
            qs[i] = rot.quat_mul(state0.q[i], rot.quat_exp(s * phi[i]))
        fr.node_x.append(xs)
        fr.node_q.append(qs)
        fr.node_R.append(_rotations(qs))
    fr.qm = fr.node_q[1]
    fr.Rm = fr.node_R[1]
    return fr


def residual_partials(mech, state0, state1, u, lam, dt, mu=None):
    """Exact partials of the full step residual.

    Returns (D0, D1, Du, Dl): derivatives with respect to the state
    tangent at k (12 nb), the successor tangent extended by the
    projection impulses (12 nb + c), the controls, and the multipliers.
    Rows per body: [position, linear momentum, attitude, angular
    momentum], followed by the c velocity-projection rows.
    """
    nb = mech.n_bodies
    nt = 12 * nb
    m = mech.n_controls
    c = mech.n_constraints
    u = np.zeros(m) if u is None else np.asarray(u, dtype=float).reshape(m)
    mu = np.zeros(c) if mu is None else np.asarray(mu, dtype=float).reshape(c)
    v1p, w1p, G1, Minv = _preprojection_velocities(mech, state1, mu)
    vm = 0.5 * (state0.v + v1p)
    wm = 0.5 * (state0.w + w1p)
    phi = np.empty((nb, 3))
    for i in range(nb):
        phi[i] = rot.quat_log(
            rot.quat_mul(rot.quat_conj(state0.q[i]), state1.q[i]))
    fr = _interp_frames(mech, state0, state1, phi)

    # attitude chain matrices per body
    Jr_inv = [rot.so3_jac_right_inv(phi[i]) for i in range(nb)]
    Jl_inv = [rot.so3_jac_left_inv(phi[i]) for i in range(nb)]

    D0 = np.zeros((nt, nt))
    D1 = np.zeros((nt, nt))
    Du = np.zeros((nt, m))
    Dl = np.zeros((nt, c))

    def x_col(b):
        return slice(12 * b, 12 * b + 3)

    def v_col(b):
        return slice(12 * b + 3, 12 * b + 6)

    def t_col(b):
        return slice(12 * b + 6, 12 * b + 9)

    def w_col(b):
        return slice(12 * b + 9, 12 * b + 12)

    for i, body in enumerate(mech.bodies):
        s = 12 * i
        J = body.inertia
        # position reconstruction rows
        D1[s:s + 3, x_col(i)] = _I3
        D1[s:s + 3, v_col(i)] = -0.5 * dt * _I3
        D0[s:s + 3, x_col(i)] = -_I3
        D0[s:s + 3, v_col(i)] = -0.5 * dt * _I3
        # attitude reconstruction rows
        D1[s + 6:s + 9, t_col(i)] = Jr_inv[i]
        D1[s + 6:s + 9, w_col(i)] = -0.5 * dt * _I3
        D0[s + 6:s + 9, t_col(i)] = -Jl_inv[i]
        D0[s + 6:s + 9, w_col(i)] = -0.5 * dt * _I3
        # momentum rows, velocity blocks
        D1[s + 3:s + 6, v_col(i)] = body.mass * _I3
        D0[s + 3:s + 6, v_col(i)] = -body.mass * _I3
        gyro = 0.5 * dt * (rot.hat(wm[i]) @ J - rot.hat(J @ wm[i]))
        D1[s + 9:s + 12, w_col(i)] = J + gyro
        D0[s + 9:s + 12, w_col(i)] = -J + gyro

    # applied forces act at the midpoint node; constraint forces act
    # through the Gauss-averaged path Jacobian
    Dcfg, Dvel, Dum = _applied_partials(mech, fr.qm, fr.Rm, vm, wm, u)

    def add_wrench_rows(i, block_f, block_t, target, col):
        target[12 * i + 3:12 * i + 6, col] += block_f
        target[12 * i + 9:12 * i + 12, col] += block_t

    # chains from endpoint tangents to node configuration tangents
    node_terms = []
    for k, sgauss in enumerate(_GAUSS_S):
        Hk = _wrench_hessian(mech, fr.node_x[k], fr.node_q[k], fr.node_R[k],
                             lam)
        ch0 = []
        ch1 = []
        for i in range(nb):
            sp = sgauss * phi[i]
            Jr_s = rot.so3_jac_right(sp)
            ch1.append(sgauss * Jr_s @ Jr_inv[i])
            ch0.append(rot.rot_from_vec(sp).T - sgauss * Jr_s @ Jl_inv[i])
        node_terms.append((_GAUSS_W[k], Hk, sgauss, ch0, ch1))
    # midpoint chains for the applied wrench (the middle Gauss node)
    _, _, smid, ch0_mid, ch1_mid = node_terms[1]

    for i in range(nb):
        rows_f = slice(6 * i, 6 * i + 3)
        rows_t = slice(6 * i + 3, 6 * i + 6)
        for jb in range(nb):
            cols_x = slice(6 * jb, 6 * jb + 3)
            cols_t = slice(6 * jb + 3, 6 * jb + 6)
            # applied wrench contributions
            for rows, out_rows in ((rows_f, slice(12 * i + 3, 12 * i + 6)),
                                   (rows_t, slice(12 * i + 9, 12 * i + 12))):
                blk_x = Dcfg[rows, cols_x]
                blk_t = Dcfg[rows, cols_t]
                D1[out_rows, x_col(jb)] += -dt * smid * blk_x
                D0[out_rows, x_col(jb)] += -dt * (1.0 - smid) * blk_x
                D1[out_rows, t_col(jb)] += -dt * blk_t @ ch1_mid[jb]
                D0[out_rows, t_col(jb)] += -dt * blk_t @ ch0_mid[jb]
                vblk = Dvel[rows, cols_x]
                wblk = Dvel[rows, cols_t]
                D1[out_rows, v_col(jb)] += -0.5 * dt * vblk
                D0[out_rows, v_col(jb)] += -0.5 * dt * vblk
                D1[out_rows, w_col(jb)] += -0.5 * dt * wblk
                D0[out_rows, w_col(jb)] += -0.5 * dt * wblk
                # constraint wrench contributions, node by node
                for wt, Hk, sgauss, ch0, ch1 in node_terms:
                    hx = Hk[rows, cols_x]
                    ht = Hk[rows, cols_t]
                    D1[out_rows, x_col(jb)] += -dt * wt * sgauss * hx
                    D0[out_rows, x_col(jb)] += -dt * wt * (1.0 - sgauss) * hx
                    D1[out_rows, t_col(jb)] += -dt * wt * ht @ ch1[jb]
                    D0[out_rows, t_col(jb)] += -dt * wt * ht @ ch0[jb]

    Gbar6 = None
    for k in range(3):
        _, Gs = _constraint_eval(mech, fr.node_x[k], fr.node_q[k],
                                 fr.node_R[k], want_blocks=True)
        Gbar6 = _GAUSS_W[k] * Gs if Gbar6 is None else Gbar6 + _GAUSS_W[k] * Gs
    Wl = -dt * Gbar6.T  # (6 nb, c)
    for i in range(nb):
        add_wrench_rows(i, Wl[6 * i:6 * i + 3, :], Wl[6 * i + 3:6 * i + 6, :],
                        Dl, slice(None))
    for i in range(nb):
        add_wrench_rows(i, -dt * Dum[6 * i:6 * i + 3, :],
                        -dt * Dum[6 * i + 3:6 * i + 6, :], Du, slice(None))

    # the rows above act on the stage-one velocities; chain them to the
    # stored (projected) velocities and the projection impulses
    Dv = np.zeros((nt, 6 * nb))
    for b in range(nb):
        Dv[:, 6 * b:6 * b + 3] = D1[:, v_col(b)]
        Dv[:, 6 * b + 3:6 * b + 6] = D1[:, w_col(b)]
    R1 = _rotations(state1.q)
    Hmu = _wrench_hessian(mech, state1.x, state1.q, R1, mu)
    corr = Dv @ (-(Minv @ Hmu))
    for b in range(nb):
        D1[:, x_col(b)] += corr[:, 6 * b:6 * b + 3]
        D1[:, t_col(b)] += corr[:, 6 * b + 3:6 * b + 6]
    Dmu = Dv @ (-(Minv @ G1.T))

    # projection rows G(z1) V+ = 0: the configuration sensitivity of
    # each row is the corresponding slice of the same second-derivative
    # tensor that the wrench curvature contracts, recovered one
    # constraint at a time
    V1 = _flat_velocity(state1.v, state1.w)
    Hr = np.empty((c, 6 * nb))
    unit = np.zeros(c)
    for i in range(c):
        unit[i] = 1.0
        Hr[i] = V1 @ _wrench_hessian(mech, state1.x, state1.q, R1, unit)
        unit[i] = 0.0
    Dproj = np.zeros((c, nt))
    for b in range(nb):
        Dproj[:, x_col(b)] = Hr[:, 6 * b:6 * b + 3]
        Dproj[:, v_col(b)] = G1[:, 6 * b:6 * b + 3]
        Dproj[:, t_col(b)] = Hr[:, 6 * b + 3:6 * b + 6]
        Dproj[:, w_col(b)] = G1[:, 6 * b + 3:6 * b + 6]

    D0e = np.vstack([D0, np.zeros((c, nt))])
    D1e = np.block([[D1, Dmu], [Dproj, np.zeros((c, c))]])
    Due = np.vstack([Du, np.zeros((c, m))])
    Dle = np.vstack([Dl, np.zeros((c, c))])
    return D0e, D1e, Due, Dle
