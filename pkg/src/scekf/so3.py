"""Rotation-group primitives and Euler-angle Jacobians.

Conventions
-----------
* Rotations are plain ``(3, 3)`` numpy arrays mapping IMU-frame vectors to
  the world frame.
* Rotation errors are left (world-frame) perturbations: ``R = Exp(theta) @ R_hat``.
* Euler angles follow the extrinsic "XYZ" convention
  ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

SMALL_ANGLE = 1e-6
NEAR_PI = 1e-3
GIMBAL_TOL = 1e-6


class GimbalLock(ValueError):
    """Raised when |cos(pitch)| is too small for the Euler parametrization."""


class EulerXYZ(NamedTuple):
    roll: float
    pitch: float
    yaw: float


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = float(v[0]), float(v[1]), float(v[2])
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    ortho = np.linalg.norm(r.T @ r - np.eye(3))
    return ortho < tol and abs(np.linalg.det(r) - 1.0) < tol


def exp_so3(theta) -> np.ndarray:
    """Rodrigues exponential map so(3) -> SO(3)."""
    x, y, z = float(theta[0]), float(theta[1]), float(theta[2])
    angle2 = x * x + y * y + z * z
    if angle2 < SMALL_ANGLE * SMALL_ANGLE:
        a = 1.0 - angle2 / 6.0
        b = 0.5 - angle2 / 24.0
    else:
        angle = math.sqrt(angle2)
        a = math.sin(angle) / angle
        b = (1.0 - math.cos(angle)) / angle2
    # I + a K + b K^2 written out, K = skew(theta)
    bxy, bxz, byz = b * x * y, b * x * z, b * y * z
    return np.array([
        [1.0 - b * (y * y + z * z), bxy - a * z, bxz + a * y],
        [bxy + a * z, 1.0 - b * (x * x + z * z), byz - a * x],
        [bxz - a * y, byz + a * x, 1.0 - b * (x * x + y * y)],
    ])


def log_so3(r: np.ndarray) -> np.ndarray:
    """Principal-branch logarithm SO(3) -> so(3), with ``|theta| <= pi``.

    At exactly pi the axis sign is fixed so that its first nonzero component
    is positive.
    """
    r = np.asarray(r, dtype=float)
    w = 0.5 * vee(r - r.T)
    s = float(np.linalg.norm(w))
    c = 0.5 * (float(np.trace(r)) - 1.0)
    angle = math.atan2(s, c)
    if angle < SMALL_ANGLE:
        return w * (1.0 + angle * angle / 6.0)
    if angle < math.pi - NEAR_PI:
        return w * (angle / s)
    # near pi: sin(angle) carries no axis information, use the symmetric part
    sym = 0.5 * (r + r.T) - c * np.eye(3)
    col = int(np.argmax(np.diag(sym)))
    axis = sym[:, col] / math.sqrt(max(sym[col, col], 1e-300))
    axis /= np.linalg.norm(axis)
    if s > 1e-12:
        if float(axis @ w) < 0.0:
            axis = -axis
    else:
        nz = np.flatnonzero(np.abs(axis) > 1e-12)
        if nz.size and axis[nz[0]] < 0.0:
            axis = -axis
    return angle * axis


def right_jacobian(theta) -> np.ndarray:
    """Right Jacobian: ``Exp(theta + d) ~= Exp(theta) @ Exp(Jr(theta) @ d)``."""
    x, y, z = float(theta[0]), float(theta[1]), float(theta[2])
    angle2 = x * x + y * y + z * z
    if angle2 < SMALL_ANGLE * SMALL_ANGLE:
        a = 0.5 - angle2 / 24.0
        b = 1.0 / 6.0 - angle2 / 120.0
    else:
        angle = math.sqrt(angle2)
        a = (1.0 - math.cos(angle)) / angle2
        b = (angle - math.sin(angle)) / (angle2 * angle)
    # I - a K + b K^2
    bxy, bxz, byz = b * x * y, b * x * z, b * y * z
    return np.array([
        [1.0 - b * (y * y + z * z), bxy + a * z, bxz - a * y],
        [bxy - a * z, 1.0 - b * (x * x + z * z), byz + a * x],
        [bxz + a * y, byz - a * x, 1.0 - b * (x * x + y * y)],
    ])


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about the world z-axis."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose_euler_xyz(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return yaw_rotation(yaw) @ rot_y(pitch) @ rot_x(roll)


def decompose_euler_xyz(r: np.ndarray) -> EulerXYZ:
    """Split ``R = Rz(yaw) Ry(pitch) Rx(roll)``; raises GimbalLock near |pitch| = pi/2."""
    cos_pitch = math.hypot(r[0, 0], r[1, 0])
    if cos_pitch <= GIMBAL_TOL:
        raise GimbalLock(f"|cos(pitch)| = {cos_pitch:.3g} <= {GIMBAL_TOL}")
    pitch = math.atan2(-r[2, 0], cos_pitch)
    yaw = math.atan2(r[1, 0], r[0, 0])
    roll = math.atan2(r[2, 1], r[2, 2])
    return EulerXYZ(roll, pitch, yaw)


def yaw_of(r: np.ndarray) -> float:
    """Yaw angle of ``r``; checks for gimbal lock like :func:`decompose_euler_xyz`."""
    if math.hypot(r[0, 0], r[1, 0]) <= GIMBAL_TOL:
        raise GimbalLock("yaw undefined at gimbal lock")
    return math.atan2(r[1, 0], r[0, 0])


def euler_rate_jacobian(yaw: float, pitch: float) -> np.ndarray:
    """Map from Euler-angle rates ``(yaw, pitch, roll)`` to world-frame rotation increments.

    Columns are the world z-axis, the yawed y-axis and the yawed-then-pitched
    x-axis. ``det = -cos(pitch)``.
    """
    ca, sa = math.cos(yaw), math.sin(yaw)
    cb, sb = math.cos(pitch), math.sin(pitch)
    return np.array([
        [0.0, -sa, ca * cb],
        [0.0, ca, sa * cb],
        [1.0, 0.0, -sb],
    ])


def euler_rate_jacobian_inv(yaw: float, pitch: float) -> np.ndarray:
    """Closed-form inverse of :func:`euler_rate_jacobian`."""
    cb = math.cos(pitch)
    if abs(cb) <= GIMBAL_TOL:
        raise GimbalLock(f"|cos(pitch)| = {abs(cb):.3g} <= {GIMBAL_TOL}")
    ca, sa = math.cos(yaw), math.sin(yaw)
    tb = math.tan(pitch)
    sec = 1.0 / cb
    return np.array([
        [ca * tb, sa * tb, 1.0],
        [-sa, ca, 0.0],
        [ca * sec, sa * sec, 0.0],
    ])


# d(theta_z)/dr: only the yaw rate feeds the z component of the yaw-only rotation vector
YAW_SELECT = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def hz_matrix(yaw: float, pitch: float) -> np.ndarray:
    """Sensitivity of the yaw-only rotation vector to a left attitude perturbation."""
    cb = math.cos(pitch)
    if abs(cb) <= GIMBAL_TOL:
        raise GimbalLock(f"|cos(pitch)| = {abs(cb):.3g} <= {GIMBAL_TOL}")
    tb = math.sin(pitch) / cb
    return np.array([
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0],
        [math.cos(yaw) * tb, math.sin(yaw) * tb, 1.0],
    ])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w
