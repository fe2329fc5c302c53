"""Mechanism description, tangent charts, and serialization."""

import math

import numpy as np
import pytest

from maxlqr.bodies import (Body, Joint, Mechanism, default_state,
                           mechanism_from_dict, mechanism_to_dict, retract,
                           save_mechanism, load_mechanism, tangent_error)


def two_link():
    bodies = [Body("a", 1.0, [0.01, 0.02, 0.03], length=1.0),
              Body("b", 2.0, [0.04, 0.05, 0.06], length=0.5)]
    joints = [Joint("pin", -1, 0, anchor_child=[0.0, 0.0, 0.5],
                    axis=[1.0, 0.0, 0.0], actuated=True),
              Joint("revolute", 0, 1, anchor_parent=[0.0, 0.0, -0.5],
                    anchor_child=[0.0, 0.0, 0.25], axis=[1.0, 0.0, 0.0],
                    friction=0.2)]
    return Mechanism(bodies, joints)


def test_vector_inertia_becomes_diagonal_matrix():
    b = Body("a", 1.0, [0.1, 0.2, 0.3])
    assert np.allclose(b.inertia, np.diag([0.1, 0.2, 0.3]))


def test_nonpositive_mass_rejected():
    with pytest.raises(ValueError):
        Body("a", 0.0, [0.1, 0.1, 0.1])


def test_unknown_joint_kind_rejected():
    with pytest.raises(ValueError):
        Joint("ball", -1, 0)


def test_revolute_requires_axis():
    with pytest.raises(ValueError):
        Joint("revolute", -1, 0)


def test_axis_is_normalized():
    j = Joint("revolute", -1, 0, axis=[0.0, 0.0, 2.0])
    assert np.allclose(j.axis, [0.0, 0.0, 1.0])
    assert np.allclose(j.axis_child, [0.0, 0.0, 1.0])


def test_negative_friction_rejected():
    with pytest.raises(ValueError):
        Joint("pin", -1, 0, friction=-0.1)


def test_axis_complement_is_right_handed_orthonormal():
    j = Joint("revolute", -1, 0, axis=[0.0, 1.0, 0.0])
    u, w = j.axis_complement
    assert abs(np.dot(u, j.axis)) < 1e-15
    assert abs(np.dot(w, j.axis)) < 1e-15
    assert abs(np.dot(u, w)) < 1e-15
    assert np.allclose(np.cross(j.axis, u), w, atol=1e-15)


def test_constraint_rows_per_kind():
    assert Joint("pin", -1, 0).rows == 3
    assert Joint("revolute", -1, 0, axis=[1, 0, 0]).rows == 5
    assert Joint("prismatic", -1, 0, axis=[1, 0, 0]).rows == 5
    assert Joint("fixed_orientation", -1, 0).rows == 3


def test_mechanism_counts_and_offsets():
    mech = two_link()
    assert mech.n_bodies == 2
    assert mech.n_constraints == 3 + 5
    assert mech.row_offsets == (0, 3)
    assert mech.actuated_joints == (0,)
    assert mech.n_controls == 1
    assert mech.tangent_dim == 24


def test_joint_index_validation():
    bodies = [Body("a", 1.0, [0.1, 0.1, 0.1])]
    with pytest.raises(ValueError):
        Mechanism(bodies, [Joint("pin", -1, 1)])
    with pytest.raises(ValueError):
        Mechanism(bodies, [Joint("pin", 0, 0)])


def test_default_state_shapes_and_identity_attitude():
    mech = two_link()
    z = default_state(mech)
    assert z.x.shape == (2, 3) and z.q.shape == (2, 4)
    assert np.allclose(z.q[:, 0], 1.0)
    assert np.allclose(z.raw()[:13],
                       [0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0])


def test_retract_and_tangent_error_are_inverse():
    mech = two_link()
    z = default_state(mech)
    rng = np.random.default_rng(3)
    delta = rng.uniform(-0.5, 0.5, mech.tangent_dim)
    moved = retract(z, delta)
    assert np.allclose(tangent_error(moved, z), delta, atol=1e-12)
    assert np.allclose(tangent_error(z, z), 0.0, atol=1e-15)


def test_retract_keeps_quaternions_unit():
    z = default_state(two_link())
    moved = retract(z, np.full(24, 0.3))
    assert np.allclose(np.linalg.norm(moved.q, axis=1), 1.0, atol=1e-12)


def test_mechanism_dict_round_trip():
    mech = two_link()
    data = mechanism_to_dict(mech)
    back = mechanism_from_dict(data)
    assert mechanism_to_dict(back) == data


def test_mechanism_file_round_trip(tmp_path):
    mech = two_link()
    path = tmp_path / "mech.json"
    save_mechanism(mech, path)
    back = load_mechanism(path)
    assert mechanism_to_dict(back) == mechanism_to_dict(mech)
    assert back.joints[1].friction == 0.2


def test_full_inertia_matrix_survives_round_trip():
    J = np.array([[0.1, 0.01, 0.0], [0.01, 0.2, 0.0], [0.0, 0.0, 0.3]])
    mech = Mechanism([Body("a", 1.0, J)], [])
    back = mechanism_from_dict(mechanism_to_dict(mech))
    assert np.allclose(back.bodies[0].inertia, J)


def test_unsupported_format_rejected():
    with pytest.raises(ValueError):
        mechanism_from_dict({"format": "mechanism/99", "gravity": [0, 0, 0],
                             "bodies": [], "joints": []})
