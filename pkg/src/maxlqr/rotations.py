"""Quaternion and SO(3) tangent-space utilities.

Conventions used throughout the package:

* quaternions are scalar-first arrays (w, x, y, z) and map body to world;
* attitude tangent perturbations are right-multiplicative body-frame rotation
  vectors: q_perturbed = q * quat_exp(delta);
* quat_exp takes a rotation vector (angle = its norm) and quat_log returns
  one, canonicalized to the shortest representation (scalar part >= 0).
"""

import math

import numpy as np

_EPS = 1e-9


def hat(v):
    """Skew-symmetric matrix such that hat(a) @ b = cross(a, b)."""
    out = np.zeros((3, 3))
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    return out


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    out = np.empty(4)
    out[0] = aw * bw - ax * bx - ay * by - az * bz
    out[1] = aw * bx + ax * bw + ay * bz - az * by
    out[2] = aw * by - ax * bz + ay * bw + az * bx
    out[3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def quat_conj(q):
    out = np.empty(4)
    out[0] = q[0]
    out[1] = -q[1]
    out[2] = -q[2]
    out[3] = -q[3]
    return out


def quat_normalize(q):
    return q / math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])


def quat_to_rot(q):
    """Rotation matrix (body to world) of a unit quaternion."""
    w, x, y, z = q
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    out = np.empty((3, 3))
    out[0, 0] = 1.0 - 2.0 * (yy + zz)
    out[0, 1] = 2.0 * (xy - wz)
    out[0, 2] = 2.0 * (xz + wy)
    out[1, 0] = 2.0 * (xy + wz)
    out[1, 1] = 1.0 - 2.0 * (xx + zz)
    out[1, 2] = 2.0 * (yz - wx)
    out[2, 0] = 2.0 * (xz - wy)
    out[2, 1] = 2.0 * (yz + wx)
    out[2, 2] = 1.0 - 2.0 * (xx + yy)
    return out


def quat_exp(phi):
    """Unit quaternion rotating by the vector phi (angle = |phi|)."""
    angle = math.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    half = 0.5 * angle
    out = np.empty(4)
    if angle < _EPS:
        # sin(a/2)/a = 1/2 - a^2/48 + O(a^4)
        s = 0.5 - angle * angle / 48.0
        out[0] = 1.0 - half * half / 2.0
    else:
        s = math.sin(half) / angle
        out[0] = math.cos(half)
    out[1] = s * phi[0]
    out[2] = s * phi[1]
    out[3] = s * phi[2]
    return out


def quat_log(q):
    """Rotation vector of a unit quaternion (shortest path, |result| <= pi)."""
    w, x, y, z = q
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    n = math.sqrt(x * x + y * y + z * z)
    if n < _EPS:
        # 2*atan2(n, w)/n = 2/w * (1 - n^2/(3 w^2)) + O(n^4)
        k = 2.0 / w * (1.0 - n * n / (3.0 * w * w))
    else:
        k = 2.0 * math.atan2(n, w) / n
    out = np.empty(3)
    out[0] = k * x
    out[1] = k * y
    out[2] = k * z
    return out


def rot_from_vec(phi):
    """Rodrigues formula: rotation matrix of a rotation vector."""
    angle = math.sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
    K = hat(phi)
    if angle < _EPS:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(angle) / angle
    b = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + a * K + b * (K @ K)


def so3_jac_right(phi):
    """Right Jacobian J_r: exp(phi + d) = exp(phi) * exp(J_r(phi) d) + O(d^2)."""
    theta2 = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]
    K = hat(phi)
    if theta2 < _EPS * _EPS:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    theta = math.sqrt(theta2)
    a = (1.0 - math.cos(theta)) / theta2
    b = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) - a * K + b * (K @ K)


def so3_jac_right_inv(phi):
    theta2 = phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2]
    K = hat(phi)
    if theta2 < _EPS * _EPS:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    theta = math.sqrt(theta2)
    c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * K + c * (K @ K)


def so3_jac_left(phi):
    return so3_jac_right(phi).T


def so3_jac_left_inv(phi):
    return so3_jac_right_inv(phi).T


def wrap_angle(theta):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    wrapped = -((-theta + math.pi) % (2.0 * math.pi) - math.pi)
    return wrapped


def planar_angle(q, tol=1e-6):
    """Rotation angle about the +x axis of a planar (x-axis) quaternion.

    Raises ValueError when the quaternion has out-of-plane components
    larger than tol, since a single angle no longer describes it.
    """
    w, x, y, z = q
    if math.hypot(y, z) > tol:
        raise ValueError("quaternion is not a rotation about the x axis")
    return wrap_angle(2.0 * math.atan2(x, w))
