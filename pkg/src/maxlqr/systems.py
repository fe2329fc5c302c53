"""Standard mechanisms and their regulation references.

All systems move in the world y-z plane with gravity along -z; planar
hinges use the +x axis. Rod bodies extend along their body z axis with
the COM at the centre, so anchors sit at (0, 0, +-l/2). Each builder
returns a System bundling the mechanism, an equilibrium reference with
its gravity-compensating controls and multipliers, minimal-coordinate
weights, and chart functions mapping between maximal states and the
familiar minimal coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rotations as rot
from .bodies import Body, Joint, Mechanism, MechanismState, retract
from .dynamics import (gravity_compensation, project_to_constraints,
                       project_velocities)
from .errors import AssemblyFailure, ChartSingularity


def _planar_angle(q):
    try:
        return rot.planar_angle(q)
    except ValueError as exc:
        raise ChartSingularity(str(exc)) from None


def _rot_x_quat(theta):
    return np.array([math.cos(theta / 2), math.sin(theta / 2), 0.0, 0.0])


def _rod(name, mass, j_transverse, length):
    axial = 0.5 * mass * (length / 20.0) ** 2
    return Body(name, mass, [j_transverse, j_transverse, axial], length)


def _block(name, mass, length):
    j = mass * length * length / 6.0
    return Body(name, mass, [j, j, j], length)


@dataclass
class System:
    """A mechanism plus everything its control experiments need.

    swing_coords is the rest pose the stock open-loop drive oscillates
    about; systems regulated to an unstable pose point it at their
    stable hanging configuration instead of the reference.
    """

    name: str
    mech: Mechanism
    reference: MechanismState
    u_ref: np.ndarray
    lam_ref: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    minimal_coords: Callable[[MechanismState], np.ndarray]
    state_from_minimal: Callable[..., MechanismState]
    angle_mask: np.ndarray
    swing_coords: np.ndarray = None
    ref_coords: np.ndarray = field(init=False)

    def __post_init__(self):
        self.ref_coords = self.minimal_coords(self.reference)
        if self.swing_coords is None:
            self.swing_coords = self.ref_coords.copy()

    @property
    def n_min(self):
        return self.angle_mask.shape[0]

    def coord_error(self, coords, ref=None):
        """Difference of minimal coordinates with angle wrapping."""
        ref = self.ref_coords if ref is None else ref
        d = np.asarray(coords, dtype=float) - np.asarray(ref, dtype=float)
        for i in np.flatnonzero(self.angle_mask):
            d[i] = rot.wrap_angle(d[i])
        return d

    def chart_error(self, state):
        """Minimal-coordinate deviation of a state from the reference."""
        return self.coord_error(self.minimal_coords(state))


def chart_jacobian(system, state=None, h=1e-6):
    """Jacobian of the minimal-coordinate chart in the state tangent,
    (n_min, 12 nb), by central differences with angle wrapping."""
    state = system.reference if state is None else state
    base = system.minimal_coords(state)
    nt = system.mech.tangent_dim
    F = np.zeros((system.n_min, nt))
    for k in range(nt):
        e = np.zeros(nt)
        e[k] = h
        cp = system.minimal_coords(retract(state, e))
        cm = system.minimal_coords(retract(state, -e))
        F[:, k] = system.coord_error(cp, cm) / (2 * h)
    return F


def matched_cost(system):
    """Maximal-coordinate stage cost matching the minimal weights at the
    reference: Q_max = F' Q F with F the chart Jacobian. Rank-deficient
    by construction, which the synthesis accepts."""
    F = chart_jacobian(system)
    return F.T @ system.Q @ F, system.R.copy()


# ---------------------------------------------------------------------------
# planar chain helpers

def _chain_pose(theta_abs, lengths, base=np.zeros(2)):
    """COM positions and attachment points of a serial chain of rods in
    the y-z plane. theta_abs are absolute angles from hanging."""
    tip = np.asarray(base, dtype=float)
    coms = []
    for th, l in zip(theta_abs, lengths):
        d = np.array([math.sin(th), -math.cos(th)])
        coms.append(tip + 0.5 * l * d)
        tip = tip + l * d
    return coms, tip


def _pendulum_like_state(mech, theta_abs, omega_abs, lengths,
                         base=np.zeros(2), base_vel=np.zeros(2), k=0):
    """State of a serial chain given absolute angles/rates from hanging."""
    nb = len(theta_abs)
    x = np.zeros((nb, 3))
    v = np.zeros((nb, 3))
    q = np.zeros((nb, 4))
    w = np.zeros((nb, 3))
    tip = np.array([0.0, base[0], base[1]])
    tip_v = np.array([0.0, base_vel[0], base_vel[1]])
    for i in range(nb):
        th, thd, l = theta_abs[i], omega_abs[i], lengths[i]
        d = np.array([0.0, math.sin(th), -math.cos(th)])
        dd = np.array([0.0, math.cos(th), math.sin(th)])  # d(d)/d(th)
        x[i] = tip + 0.5 * l * d
        v[i] = tip_v + 0.5 * l * thd * dd
        q[i] = _rot_x_quat(th)
        w[i] = np.array([thd, 0.0, 0.0])
        tip = tip + l * d
        tip_v = tip_v + l * thd * dd
    return MechanismState(k, x, v, q, w)


# ---------------------------------------------------------------------------
# builders

def pendulum():
    """Single rod hanging from the origin on a planar hinge."""
    link = _rod("link1", 1.0, 0.084, 1.0)
    joint = Joint("revolute", -1, 0, anchor_parent=[0, 0, 0],
                  anchor_child=[0, 0, 0.5], axis=[1, 0, 0])
    mech = Mechanism([link], [joint])

    def coords(st):
        return np.array([_planar_angle(st.q[0]), st.w[0, 0]])

    def from_minimal(c, k=0):
        return _pendulum_like_state(mech, [c[0]], [c[1]], [1.0], k=k)

    ref = from_minimal([0.0, 0.0])
    u_ref, lam_ref = gravity_compensation(mech, ref)
    return System("pendulum", mech, ref, u_ref, lam_ref,
                  np.eye(2), np.zeros((0, 0)), coords, from_minimal,
                  np.array([True, False]))


def _two_link(actuated_elbow):
    l1 = _rod("link1", 1.0, 0.084, 1.0)
    l2 = _rod("link2", 1.0, 0.334, 2.0)
    j1 = Joint("revolute", -1, 0, anchor_parent=[0, 0, 0],
               anchor_child=[0, 0, 0.5], axis=[1, 0, 0])
    j2 = Joint("revolute", 0, 1, anchor_parent=[0, 0, -0.5],
               anchor_child=[0, 0, 1.0], axis=[1, 0, 0],
               actuated=actuated_elbow)
    return Mechanism([l1, l2], [j1, j2])


def _two_link_coords(st):
    t1 = _planar_angle(st.q[0])
    t2 = rot.wrap_angle(_planar_angle(st.q[1]) - t1)
    return np.array([t1, t2, st.w[0, 0], st.w[1, 0] - st.w[0, 0]])


def _two_link_from_minimal(mech):
    def from_minimal(c, k=0):
        th = [c[0], c[0] + c[1]]
        om = [c[2], c[2] + c[3]]
        return _pendulum_like_state(mech, th, om, [1.0, 2.0], k=k)
    return from_minimal


def double_pendulum():
    """Two passive links; used for energy-behaviour checks."""
    mech = _two_link(actuated_elbow=False)
    from_minimal = _two_link_from_minimal(mech)
    ref = from_minimal([0.0, 0.0, 0.0, 0.0])
    u_ref, lam_ref = gravity_compensation(mech, ref)
    return System("double_pendulum", mech, ref, u_ref, lam_ref,
                  np.eye(4), np.zeros((0, 0)), _two_link_coords, from_minimal,
                  np.array([True, True, False, False]))


def acrobot():
    """Two links with an actuated elbow, regulated to the upright."""
    mech = _two_link(actuated_elbow=True)
    from_minimal = _two_link_from_minimal(mech)
    ref = from_minimal([math.pi, 0.0, 0.0, 0.0])
    u_ref, lam_ref = gravity_compensation(mech, ref)
    return System("acrobot", mech, ref, u_ref, lam_ref,
                  np.eye(4), np.eye(1), _two_link_coords, from_minimal,
                  np.array([True, True, False, False]),
                  swing_coords=np.zeros(4))


def _cart_chain(n_poles, Q, R):
    bodies = [_block("cart", 0.5, 0.5)]
    joints = [Joint("prismatic", -1, 0, anchor_parent=[0, 0, 0],
                    anchor_child=[0, 0, 0], axis=[0, 1, 0], actuated=True)]
    for i in range(n_poles):
        bodies.append(_rod(f"pole{i + 1}" if n_poles > 1 else "pole",
                           1.0, 0.084, 1.0))
        parent = i  # cart is body 0, poles follow
        anchor_p = [0, 0, 0] if i == 0 else [0, 0, 0.5]
        joints.append(Joint("revolute", parent, i + 1,
                            anchor_parent=anchor_p,
                            anchor_child=[0, 0, -0.5], axis=[1, 0, 0]))
    mech = Mechanism(bodies, joints)

    def coords(st):
        out = np.zeros(2 * (n_poles + 1))
        out[0] = st.x[0, 1]
        prev = 0.0
        for i in range(n_poles):
            a = _planar_angle(st.q[i + 1])
            out[1 + i] = rot.wrap_angle(a - prev) if i else a
            prev = a
        out[n_poles + 1] = st.v[0, 1]
        for i in range(n_poles):
            out[n_poles + 2 + i] = st.w[i + 1, 0] - (st.w[i, 0] if i else 0.0)
        return out

    def from_minimal(c, k=0):
        c = np.asarray(c, dtype=float)
        nb = n_poles + 1
        x = np.zeros((nb, 3))
        v = np.zeros((nb, 3))
        q = np.zeros((nb, 4))
        q[:, 0] = 1.0
        w = np.zeros((nb, 3))
        x[0, 1] = c[0]
        v[0, 1] = c[n_poles + 1]
        tip = x[0].copy()
        tip_v = v[0].copy()
        th = 0.0
        thd = 0.0
        for i in range(n_poles):
            th += c[1 + i]
            thd += c[n_poles + 2 + i]
            # angle measured from upright, tilting +theta toward -y
            d = np.array([0.0, -math.sin(th), math.cos(th)])
            dd = np.array([0.0, -math.cos(th), -math.sin(th)])
            x[i + 1] = tip + 0.5 * d
            v[i + 1] = tip_v + 0.5 * thd * dd
            q[i + 1] = _rot_x_quat(th)
            w[i + 1] = np.array([thd, 0.0, 0.0])
            tip = tip + d
            tip_v = tip_v + thd * dd
        return MechanismState(k, x, v, q, w)

    angle_mask = np.zeros(2 * (n_poles + 1), dtype=bool)
    angle_mask[1:n_poles + 1] = True
    ref = from_minimal(np.zeros(2 * (n_poles + 1)))
    u_ref, lam_ref = gravity_compensation(mech, ref)
    return mech, ref, u_ref, lam_ref, coords, from_minimal, angle_mask, Q, R


def cartpole():
    """Cart on a horizontal slide with one pole, regulated upright."""
    parts = _cart_chain(1, np.eye(4), np.eye(1))
    mech, ref, u_ref, lam_ref, coords, from_minimal, mask, Q, R = parts
    return System("cartpole", mech, ref, u_ref, lam_ref, Q, R,
                  coords, from_minimal, mask,
                  swing_coords=np.array([0.0, math.pi, 0.0, 0.0]))


def triple_cartpole():
    """Cart with a chain of three poles, regulated upright."""
    Q = np.diag([10.0, 10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 1.0])
    parts = _cart_chain(3, Q, 0.1 * np.eye(1))
    mech, ref, u_ref, lam_ref, coords, from_minimal, mask, Q, R = parts
    swing = np.zeros(8)
    swing[1] = math.pi
    return System("triple_cartpole", mech, ref, u_ref, lam_ref, Q, R,
                  coords, from_minimal, mask, swing_coords=swing)


# ---------------------------------------------------------------------------
# planar two-arm linkage

_DELTA_LOWER = 1.0
_DELTA_UPPER = 0.5
_DELTA_BASE = math.sqrt(2.0) * 0.5
_DELTA_Z_REF = 0.75 * math.sqrt(2.0)


def _delta_elbow(attach_yz, side):
    """Elbow position for one arm: intersection of the circle of radius
    lower about the origin with the circle of radius upper about the
    base attachment, taking the outward branch. side is -1 (left arm)
    or +1 (right arm)."""
    p = np.asarray(attach_yz, dtype=float)
    d = float(np.linalg.norm(p))
    r1, r2 = _DELTA_LOWER, _DELTA_UPPER
    if d > r1 + r2 or d < abs(r1 - r2) or d == 0.0:
        raise AssemblyFailure(
            f"arm cannot reach attachment at {p} (distance {d:.3f})")
    a = (r1 * r1 - r2 * r2 + d * d) / (2.0 * d)
    h2 = r1 * r1 - a * a
    h = math.sqrt(max(h2, 0.0))
    u = p / d
    n = np.array([-u[1], u[0]])
    lo = a * u - h * n
    hi = a * u + h * n
    # outward knee: of the two circle intersections, keep the one lying
    # further toward the arm's own side of the platform midline
    return hi if side * hi[0] >= side * lo[0] else lo


def _yz_rod_attitude(direction_yz):
    """Quaternion tilting the body z axis onto a planar direction."""
    dy, dz = direction_yz
    theta = math.atan2(-dy, dz)
    return _rot_x_quat(theta)


def delta2d():
    """Planar parallel linkage: two lower legs hinged at the origin, two
    upper arms, and a rigid horizontal base platform whose attachment
    pins carry the two torque inputs. The platform orientation is locked
    to the world, leaving its in-plane position (plus a torque-free
    axial spin of one arm) as the degrees of freedom."""
    lower1 = _rod("lower1", 1.0, 0.084, _DELTA_LOWER)
    lower2 = _rod("lower2", 1.0, 0.084, _DELTA_LOWER)
    upper1 = _rod("upper1", 0.5, 0.011, _DELTA_UPPER)
    upper2 = _rod("upper2", 0.5, 0.011, _DELTA_UPPER)
    base = _block("base", _DELTA_BASE, _DELTA_BASE)
    hb = 0.5 * _DELTA_BASE
    joints = [
        Joint("revolute", -1, 0, anchor_parent=[0, 0, 0],
              anchor_child=[0, 0, -0.5], axis=[1, 0, 0]),
        Joint("revolute", -1, 1, anchor_parent=[0, 0, 0],
              anchor_child=[0, 0, -0.5], axis=[1, 0, 0]),
        Joint("revolute", 0, 2, anchor_parent=[0, 0, 0.5],
              anchor_child=[0, 0, -0.25], axis=[1, 0, 0]),
        Joint("pin", 1, 3, anchor_parent=[0, 0, 0.5],
              anchor_child=[0, 0, -0.25]),
        Joint("pin", 2, 4, anchor_parent=[0, 0, 0.25],
              anchor_child=[0, hb, 0], axis=[1, 0, 0], actuated=True),
        Joint("pin", 3, 4, anchor_parent=[0, 0, 0.25],
              anchor_child=[0, -hb, 0], axis=[1, 0, 0], actuated=True),
        Joint("fixed_orientation", -1, 4),
    ]
    mech = Mechanism([lower1, lower2, upper1, upper2, base], joints)

    def pose(yb, zb):
        # arm 1 reaches the right platform pin, arm 2 the left one
        a1 = np.array([yb + hb, zb])
        a2 = np.array([yb - hb, zb])
        e1 = _delta_elbow(a1, +1)
        e2 = _delta_elbow(a2, -1)
        x = np.zeros((5, 3))
        q = np.zeros((5, 4))
        x[0, 1:] = 0.5 * e1
        q[0] = _yz_rod_attitude(e1)
        x[1, 1:] = 0.5 * e2
        q[1] = _yz_rod_attitude(e2)
        x[2, 1:] = 0.5 * (e1 + a1)
        q[2] = _yz_rod_attitude(a1 - e1)
        x[3, 1:] = 0.5 * (e2 + a2)
        q[3] = _yz_rod_attitude(a2 - e2)
        x[4, 1:] = (yb, zb)
        q[4] = np.array([1.0, 0.0, 0.0, 0.0])
        return x, q

    def from_minimal(c, k=0):
        yb, zb, ybd, zbd = np.asarray(c, dtype=float)
        x, q = pose(yb, zb)
        st = MechanismState(k, x, np.zeros((5, 3)), q, np.zeros((5, 3)))
        st = project_to_constraints(mech, st)
        if ybd != 0.0 or zbd != 0.0:
            from .dynamics import _constraint_eval, _rotations
            R = _rotations(st.q)
            _, G6 = _constraint_eval(mech, st.x, st.q, R, want_blocks=True)
            sel = np.zeros((2, 30))
            sel[0, 25] = 1.0  # base linear velocity, y
            sel[1, 26] = 1.0  # base linear velocity, z
            M = np.vstack([G6, sel])
            rhs = np.zeros(M.shape[0])
            rhs[-2:] = (ybd, zbd)
            V, *_ = np.linalg.lstsq(M, rhs, rcond=None)
            if np.max(np.abs(M @ V - rhs)) > 1e-8:
                raise AssemblyFailure("no velocity matches the requested "
                                      "platform rate")
            for b in range(5):
                st.v[b] = V[6 * b:6 * b + 3]
                st.w[b] = V[6 * b + 3:6 * b + 6]
        return st

    def coords(st):
        return np.array([st.x[4, 1], st.x[4, 2], st.v[4, 1], st.v[4, 2]])

    ref = from_minimal([0.0, _DELTA_Z_REF, 0.0, 0.0])
    u_ref, lam_ref = gravity_compensation(mech, ref)
    return System("delta2d", mech, ref, u_ref, lam_ref,
                  np.diag([100.0, 100.0, 1.0, 1.0]), 0.01 * np.eye(2),
                  coords, from_minimal,
                  np.array([False, False, False, False]))


BUILDERS = {
    "pendulum": pendulum,
    "double_pendulum": double_pendulum,
    "acrobot": acrobot,
    "cartpole": cartpole,
    "triple_cartpole": triple_cartpole,
    "delta2d": delta2d,
}


def make(name):
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise KeyError(f"unknown system {name!r}; available: "
                       f"{', '.join(sorted(BUILDERS))}") from None
    return builder()
