"""Planar-frame and quaternion helpers shared across the package.

Conventions: z is up; quaternions are (w, x, y, z) and rotate body-frame
vectors into the world frame. The heading ("yaw") of a rotation is the
direction of the rotated +x axis projected onto the ground plane.
"""
from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
IDENTITY_QUAT.setflags(write=False)


def wrap_pi(angle):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    if np.ndim(angle) == 0:
        wrapped = (float(angle) + math.pi) % TWO_PI - math.pi
        return math.pi if wrapped == -math.pi else wrapped
    wrapped = np.remainder(np.asarray(angle, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(wrapped == -math.pi, math.pi, wrapped)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = float(np.linalg.norm(q))
    if norm < 1e-12:
        raise ValueError("cannot normalize a zero quaternion")
    return q / norm


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v (shape (3,) or (N, 3)) by quaternion q."""
    v = np.asarray(v, dtype=float)
    w, x, y, z = (float(c) for c in q)
    if v.ndim == 1:
        tx = 2.0 * (y * v[2] - z * v[1])
        ty = 2.0 * (z * v[0] - x * v[2])
        tz = 2.0 * (x * v[1] - y * v[0])
        return np.array(
            [
                v[0] + w * tx + (y * tz - z * ty),
                v[1] + w * ty + (z * tx - x * tz),
                v[2] + w * tz + (x * ty - y * tx),
            ]
        )
    u = np.array([x, y, z])
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_from_yaw(yaw: float) -> np.ndarray:
    half = 0.5 * yaw
    return np.array([math.cos(half), 0.0, 0.0, math.sin(half)])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate(([math.cos(half)], math.sin(half) * axis))


def yaw_of_quat(q: np.ndarray) -> float:
    """Heading of the rotated +x axis; 0 if the body x axis points straight up/down."""
    w, x, y, z = (float(c) for c in q)
    fx = 1.0 - 2.0 * (y * y + z * z)  # (R @ e_x) components
    fy = 2.0 * (x * y + w * z)
    if math.hypot(fx, fy) < 1e-12:
        return 0.0
    return math.atan2(fy, fx)


def remove_yaw(q: np.ndarray) -> np.ndarray:
    """Residual tilt after factoring out the heading: R(q) = Rz(yaw) * R(tilt)."""
    return quat_mul(quat_from_yaw(-yaw_of_quat(q)), q)


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions, sign-invariant."""
    dot = min(1.0, abs(float(np.dot(a, b))))
    return 2.0 * math.acos(dot)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate_xy(v: np.ndarray, angle: float) -> np.ndarray:
    """Rotate vector(s) about the z axis; accepts (2,), (3,), (N, 2) or (N, 3)."""
    v = np.asarray(v, dtype=float)
    c = math.cos(angle)
    s = math.sin(angle)
    out = v.astype(float, copy=True)
    x = v[..., 0]
    y = v[..., 1]
    out[..., 0] = c * x - s * y
    out[..., 1] = s * x + c * y
    return out
