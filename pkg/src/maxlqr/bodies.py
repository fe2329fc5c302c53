"""Rigid bodies, joints, and mechanism state in maximal coordinates.

A mechanism is a list of free rigid bodies plus a list of joints that
constrain them.  Each body carries 13 raw state numbers (position,
linear velocity, attitude quaternion, body-frame angular velocity) and
12 tangent directions.  Joints refer to bodies by index; parent -1
means the world frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import rotations as rot

JOINT_KINDS = ("pin", "revolute", "prismatic", "fixed_orientation")

_ROWS = {"pin": 3, "revolute": 5, "prismatic": 5, "fixed_orientation": 3}

# Per-body tangent layout: [dx, dv, dtheta, domega], 12 entries.
TANGENT_PER_BODY = 12


def _as_vec3(a):
    out = np.asarray(a, dtype=float).reshape(3)
    return out


def _inertia_matrix(a):
    arr = np.asarray(a, dtype=float)
    if arr.shape == (3,):
        return np.diag(arr)
    if arr.shape == (3, 3):
        return arr.copy()
    raise ValueError(f"inertia must be a 3-vector or 3x3 matrix, got shape {arr.shape}")


@dataclass
class Body:
    """A single rigid body: mass, rotational inertia about the COM, and a
    reference length used by system builders to place anchors."""

    name: str
    mass: float
    inertia: np.ndarray
    length: float = 0.0

    def __post_init__(self):
        self.inertia = _inertia_matrix(self.inertia)
        if self.mass <= 0.0:
            raise ValueError(f"body {self.name!r} must have positive mass")


def _complement_basis(axis):
    # Deterministic right-handed pair (u, w) orthogonal to axis.
    e = np.zeros(3)
    e[int(np.argmin(np.abs(axis)))] = 1.0
    u = np.cross(axis, e)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)
    return u, w


@dataclass
class Joint:
    """Constraint between a parent body (or the world) and a child body.

    kind            one of JOINT_KINDS
    parent, child   body indices; parent may be -1 for the world
    anchor_parent   attachment point in the parent body frame (world
                    coordinates when parent is -1)
    anchor_child    attachment point in the child body frame
    axis            unit vector in the parent frame: the hinge axis for
                    revolute joints, the slide direction for prismatic
                    joints, and the torque axis used for actuation or
                    friction on pin joints (optional there)
    axis_child      the hinge axis expressed in the child frame at
                    assembly (revolute only; defaults to axis)
    rel_rotation    child orientation relative to the parent at assembly,
                    used by the orientation-locking rows of prismatic and
                    fixed-orientation joints (quaternion, scalar first)
    actuated        whether this joint carries one control input
    friction        viscous coefficient on the joint rate (>= 0)
    """

    kind: str
    parent: int
    child: int
    anchor_parent: np.ndarray = field(default_factory=lambda: np.zeros(3))
    anchor_child: np.ndarray = field(default_factory=lambda: np.zeros(3))
    axis: np.ndarray | None = None
    axis_child: np.ndarray | None = None
    rel_rotation: np.ndarray | None = None
    actuated: bool = False
    friction: float = 0.0

    def __post_init__(self):
        if self.kind not in _ROWS:
            raise ValueError(f"unknown joint kind {self.kind!r}")
        self.anchor_parent = _as_vec3(self.anchor_parent)
        self.anchor_child = _as_vec3(self.anchor_child)
        if self.axis is not None:
            ax = _as_vec3(self.axis)
            n = np.linalg.norm(ax)
            if n == 0.0:
                raise ValueError("joint axis must be nonzero")
            self.axis = ax / n
        if self.kind in ("revolute", "prismatic") and self.axis is None:
            raise ValueError(f"{self.kind} joint needs an axis")
        if self.kind == "revolute":
            if self.axis_child is None:
                self.axis_child = self.axis.copy()
            else:
                ac = _as_vec3(self.axis_child)
                self.axis_child = ac / np.linalg.norm(ac)
        if self.rel_rotation is None:
            self.rel_rotation = np.array([1.0, 0.0, 0.0, 0.0])
        else:
            self.rel_rotation = rot.quat_normalize(_as_vec3_or_quat(self.rel_rotation))
        if self.friction < 0.0:
            raise ValueError("friction coefficient must be >= 0")

    @property
    def rows(self):
        return _ROWS[self.kind]

    @cached_property
    def axis_complement(self):
        """Right-handed (u, w) pair orthogonal to the axis, parent frame."""
        if self.axis is None:
            raise ValueError("joint has no axis")
        return _complement_basis(self.axis)

    # Hats of the constant joint geometry, cached because the dynamics
    # assembly asks for them at every solver iteration.

    @cached_property
    def anchor_hats(self):
        return rot.hat(self.anchor_parent), rot.hat(self.anchor_child)

    @cached_property
    def axis_hat(self):
        return rot.hat(self.axis)

    @cached_property
    def axis_child_hat(self):
        return rot.hat(self.axis_child)

    @cached_property
    def complement_hats(self):
        u, w = self.axis_complement
        return rot.hat(u), rot.hat(w)


def _as_vec3_or_quat(a):
    out = np.asarray(a, dtype=float).reshape(-1)
    if out.shape != (4,):
        raise ValueError("quaternion must have 4 entries")
    return out


@dataclass
class Mechanism:
    """Immutable description of the bodies, joints, and gravity vector."""

    bodies: list[Body]
    joints: list[Joint]
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.gravity = _as_vec3(self.gravity)
        nb = len(self.bodies)
        for j in self.joints:
            if not (-1 <= j.parent < nb) or not (0 <= j.child < nb):
                raise ValueError("joint body index out of range")
            if j.parent == j.child:
                raise ValueError("joint cannot connect a body to itself")

    @property
    def n_bodies(self):
        return len(self.bodies)

    @cached_property
    def n_constraints(self):
        return sum(j.rows for j in self.joints)

    @cached_property
    def row_offsets(self):
        offs = []
        r = 0
        for j in self.joints:
            offs.append(r)
            r += j.rows
        return tuple(offs)

    @cached_property
    def actuated_joints(self):
        """Joint indices that carry a control input, in joint order."""
        return tuple(i for i, j in enumerate(self.joints) if j.actuated)

    @property
    def n_controls(self):
        return len(self.actuated_joints)

    @property
    def tangent_dim(self):
        return TANGENT_PER_BODY * self.n_bodies

    @cached_property
    def masses(self):
        return np.array([b.mass for b in self.bodies])

    @cached_property
    def inertias(self):
        return np.stack([b.inertia for b in self.bodies])

    @cached_property
    def inverse_mass(self):
        """Block-diagonal inverse of the mass matrix, (6 nb, 6 nb)."""
        nb = self.n_bodies
        Minv = np.zeros((6 * nb, 6 * nb))
        for i, b in enumerate(self.bodies):
            Minv[6 * i:6 * i + 3, 6 * i:6 * i + 3] = np.eye(3) / b.mass
            Minv[6 * i + 3:6 * i + 6, 6 * i + 3:6 * i + 6] = \
                np.linalg.inv(b.inertia)
        return Minv


@dataclass
class MechanismState:
    """State of every body at one time index k.

    x : (nb, 3) world positions of the COMs
    v : (nb, 3) world linear velocities
    q : (nb, 4) attitude quaternions (scalar first, body to world)
    w : (nb, 3) body-frame angular velocities
    """

    k: int
    x: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray

    def copy(self):
        return MechanismState(self.k, self.x.copy(), self.v.copy(),
                              self.q.copy(), self.w.copy())

    def raw(self):
        """Flat (13 nb,) vector [x, v, q, w] per body, mechanism order."""
        return np.concatenate(
            [np.concatenate([self.x[i], self.v[i], self.q[i], self.w[i]])
             for i in range(self.x.shape[0])])


@dataclass
class Multipliers:
    """Constraint reactions produced by one implicit step: the force
    multipliers that acted through the step and the end-of-step
    velocity-correction impulses."""

    values: np.ndarray
    k: int
    projection: np.ndarray = None


def default_state(mech):
    """All bodies at the origin, identity attitude, zero velocity."""
    nb = mech.n_bodies
    q = np.zeros((nb, 4))
    q[:, 0] = 1.0
    return MechanismState(0, np.zeros((nb, 3)), np.zeros((nb, 3)), q,
                          np.zeros((nb, 3)))


def retract(state, delta):
    """Move a state along a tangent vector (12 per body: dx, dv, dtheta, dw).

    Attitude updates multiply on the right: q <- q * exp(dtheta).
    """
    nb = state.x.shape[0]
    d = np.asarray(delta, dtype=float).reshape(nb, TANGENT_PER_BODY)
    out = state.copy()
    out.x += d[:, 0:3]
    out.v += d[:, 3:6]
    for i in range(nb):
        out.q[i] = rot.quat_mul(state.q[i], rot.quat_exp(d[i, 6:9]))
    out.w += d[:, 9:12]
    return out


def tangent_error(state_a, state_b):
    """Tangent coordinates of state_a in the chart centred at state_b.

    Satisfies retract(state_b, tangent_error(a, b)) == a up to rounding.
    """
    nb = state_a.x.shape[0]
    out = np.zeros(nb * TANGENT_PER_BODY)
    for i in range(nb):
        s = TANGENT_PER_BODY * i
        out[s:s + 3] = state_a.x[i] - state_b.x[i]
        out[s + 3:s + 6] = state_a.v[i] - state_b.v[i]
        out[s + 6:s + 9] = rot.quat_log(
            rot.quat_mul(rot.quat_conj(state_b.q[i]), state_a.q[i]))
        out[s + 9:s + 12] = state_a.w[i] - state_b.w[i]
    return out


def _body_to_dict(b):
    inertia = b.inertia
    if np.allclose(inertia, np.diag(np.diag(inertia)), atol=1e-15):
        inertia_out = list(np.diag(inertia))
    else:
        inertia_out = [list(row) for row in inertia]
    return {"name": b.name, "mass": b.mass, "inertia": inertia_out,
            "length": b.length}


def _joint_to_dict(j):
    out = {
        "kind": j.kind,
        "parent": j.parent,
        "child": j.child,
        "anchor_parent": list(j.anchor_parent),
        "anchor_child": list(j.anchor_child),
        "actuated": j.actuated,
        "friction": j.friction,
    }
    if j.axis is not None:
        out["axis"] = list(j.axis)
    if j.kind == "revolute":
        out["axis_child"] = list(j.axis_child)
    if j.kind in ("prismatic", "fixed_orientation"):
        out["rel_rotation"] = list(j.rel_rotation)
    return out


def mechanism_to_dict(mech):
    return {
        "format": "mechanism/1",
        "gravity": list(mech.gravity),
        "bodies": [_body_to_dict(b) for b in mech.bodies],
        "joints": [_joint_to_dict(j) for j in mech.joints],
    }


def mechanism_from_dict(data):
    if data.get("format") != "mechanism/1":
        raise ValueError(f"unsupported mechanism format {data.get('format')!r}")
    bodies = [Body(d["name"], d["mass"], d["inertia"], d.get("length", 0.0))
              for d in data["bodies"]]
    joints = []
    for d in data["joints"]:
        kind = d["kind"]
        if kind == "origin_pin":
            kind = "pin"
        joints.append(Joint(
            kind=kind,
            parent=d["parent"],
            child=d["child"],
            anchor_parent=d.get("anchor_parent", np.zeros(3)),
            anchor_child=d.get("anchor_child", np.zeros(3)),
            axis=d.get("axis"),
            axis_child=d.get("axis_child"),
            rel_rotation=d.get("rel_rotation"),
            actuated=d.get("actuated", False),
            friction=d.get("friction", 0.0),
        ))
    return Mechanism(bodies, joints, np.asarray(data["gravity"], dtype=float))


def save_mechanism(mech, path):
    with open(path, "w") as f:
        json.dump(mechanism_to_dict(mech), f, indent=2, sort_keys=True)
        f.write("\n")


def load_mechanism(path):
    with open(path) as f:
        return mechanism_from_dict(json.load(f))
