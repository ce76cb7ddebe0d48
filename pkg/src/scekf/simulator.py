"""Analytic pedestrian-style ground-truth trajectories and their ideal IMU streams."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np

from . import so3
from .imu import GRAVITY, ImuData, true_imu_from_kinematics
from .io import SchemaError, read_csv, write_csv

GT_COLUMNS = ("t",) + tuple(f"r{i}{j}" for i in range(3) for j in range(3)) + (
    "px", "py", "pz", "vx", "vy", "vz")

MAX_SWAY = 0.3


class InvalidProfile(ValueError):
    pass


class MotionKind(str, Enum):
    STANDSTILL = "standstill"
    STRAIGHT_WALK = "straight_walk"
    CIRCLE_WALK = "circle_walk"
    STAIR_CLIMB = "stair_climb"
    FIGURE_EIGHT = "figure_eight"


@dataclass(frozen=True)
class MotionProfile:
    """Parameters of an analytic motion.

    ``heading`` rotates the whole path about world z, ``heading_offset`` is
    the device yaw relative to the walking direction. Roll/pitch sway are
    sinusoids of amplitude ``sway_roll``/``sway_pitch`` (rad) at ``sway_freq``
    and ``2 * sway_freq``; ``bob`` is a vertical bounce amplitude in meters.
    ``yaw_sway`` swings the device yaw about the walking direction with
    frequency ``yaw_sway_freq``, as a hand-held device does.
    """

    kind: MotionKind = MotionKind.CIRCLE_WALK
    duration: float = 60.0
    rate: float = 200.0
    speed: float = 1.0
    radius: float = 5.0
    slope: float = 0.0
    heading: float = 0.0
    heading_offset: float = 0.0
    sway_roll: float = 0.0
    sway_pitch: float = 0.0
    sway_freq: float = 1.0
    yaw_sway: float = 0.0
    yaw_sway_freq: float = 0.1
    bob: float = 0.0
    bob_freq: float = 2.0
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", MotionKind(self.kind))
        if not self.duration > 0:
            raise InvalidProfile("duration must be > 0")
        if not self.rate > 0:
            raise InvalidProfile("rate must be > 0")
        if not self.speed >= 0:
            raise InvalidProfile("speed must be >= 0")
        if self.kind in (MotionKind.CIRCLE_WALK, MotionKind.STAIR_CLIMB, MotionKind.FIGURE_EIGHT):
            if not self.radius > 0:
                raise InvalidProfile("radius must be > 0")
        if self.kind is MotionKind.FIGURE_EIGHT and not self.speed > 0:
            raise InvalidProfile("figure_eight needs speed > 0")
        if abs(self.sway_roll) >= MAX_SWAY or abs(self.sway_pitch) >= MAX_SWAY:
            raise InvalidProfile(f"sway amplitudes must be below {MAX_SWAY} rad")
        if not (self.sway_freq > 0 and self.yaw_sway_freq > 0):
            raise InvalidProfile("sway frequencies must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "MotionProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidProfile(f"unknown profile fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise InvalidProfile(str(exc)) from None


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray


@dataclass
class Trajectory:
    """Ground-truth samples stored column-wise; indexing yields :class:`TrajectorySample`."""

    t: np.ndarray
    R: np.ndarray  # (N, 3, 3)
    p: np.ndarray  # (N, 3)
    v: np.ndarray  # (N, 3)
    acc: np.ndarray | None = field(default=None, repr=False)  # analytic world accel
    omega: np.ndarray | None = field(default=None, repr=False)  # analytic body rate

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> TrajectorySample:
        return TrajectorySample(float(self.t[k]), self.R[k].copy(), self.p[k].copy(), self.v[k].copy())

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.t))) if len(self.t) > 1 else 0.0

    def index_at(self, t: float, tol: float | None = None) -> int:
        """Index of the sample nearest to ``t``, within half a sample period by default."""
        if len(self.t) == 0:
            raise ValueError("empty trajectory")
        if tol is None:
            tol = 0.5 * self.dt if len(self.t) > 1 else 0.0
        k = int(np.searchsorted(self.t, t))
        cands = [c for c in (k - 1, k) if 0 <= c < len(self.t)]
        best = min(cands, key=lambda c: abs(self.t[c] - t))
        if abs(self.t[best] - t) > tol + 1e-12:
            raise ValueError(f"time {t} outside trajectory span [{self.t[0]}, {self.t[-1]}]")
        return best

    def yaws(self) -> np.ndarray:
        return np.arctan2(self.R[:, 1, 0], self.R[:, 0, 0])

    def rotated(self, yaw: float) -> "Trajectory":
        """Copy of the trajectory with the world frame rotated about z by ``yaw``."""
        rz = so3.yaw_rotation(yaw)
        return Trajectory(
            self.t.copy(), rz @ self.R, self.p @ rz.T, self.v @ rz.T,
            None if self.acc is None else self.acc @ rz.T,
            None if self.omega is None else self.omega.copy(),
        )

    def to_csv(self, path) -> None:
        write_csv(path, GT_COLUMNS, np.column_stack(
            [self.t, self.R.reshape(-1, 9), self.p, self.v]))

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        data = read_csv(path, GT_COLUMNS)
        if len(data) and not np.all(np.diff(data[:, 0]) > 0):
            raise SchemaError(f"{path}: timestamps must be strictly increasing")
        return cls(data[:, 0], data[:, 1:10].reshape(-1, 3, 3), data[:, 10:13], data[:, 13:16])


def _planar_path(profile: MotionProfile, t: np.ndarray):
    """Horizontal position/velocity/acceleration and heading (+ rate) in the path frame."""
    n = len(t)
    zeros = np.zeros(n)
    kind = profile.kind
    s = profile.speed
    if kind is MotionKind.STANDSTILL:
        xy = np.zeros((n, 2))
        return xy, xy.copy(), xy.copy(), zeros, zeros
    if kind is MotionKind.STRAIGHT_WALK:
        pos = np.column_stack([s * t, zeros])
        vel = np.column_stack([np.full(n, s), zeros])
        return pos, vel, np.zeros((n, 2)), zeros, zeros
    if kind in (MotionKind.CIRCLE_WALK, MotionKind.STAIR_CLIMB):
        r = profile.radius
        w = s / r
        phi = w * t
        pos = r * np.column_stack([np.sin(phi), 1.0 - np.cos(phi)])
        vel = s * np.column_stack([np.cos(phi), np.sin(phi)])
        acc = s * w * np.column_stack([-np.sin(phi), np.cos(phi)])
        return pos, vel, acc, phi, np.full(n, w)
    # figure eight: x = A sin(W t), y = A/2 sin(2 W t)
    a = profile.radius
    w = s / a
    sw, cw = np.sin(w * t), np.cos(w * t)
    s2, c2 = np.sin(2 * w * t), np.cos(2 * w * t)
    pos = np.column_stack([a * sw, 0.5 * a * s2])
    vel = np.column_stack([a * w * cw, a * w * c2])
    acc = np.column_stack([-a * w * w * sw, -2.0 * a * w * w * s2])
    speed2 = vel[:, 0] ** 2 + vel[:, 1] ** 2
    heading = np.unwrap(np.arctan2(vel[:, 1], vel[:, 0]))
    heading_rate = (vel[:, 0] * acc[:, 1] - vel[:, 1] * acc[:, 0]) / speed2
    return pos, vel, acc, heading, heading_rate


def kinematics(profile: MotionProfile, t: np.ndarray):
    """Analytic (p, v, a_world, roll, pitch, yaw, roll_rate, pitch_rate, yaw_rate) at times ``t``."""
    t = np.asarray(t, dtype=float)
    pos2, vel2, acc2, heading, heading_rate = _planar_path(profile, t)
    ch, sh = math.cos(profile.heading), math.sin(profile.heading)
    rot2 = np.array([[ch, -sh], [sh, ch]])
    n = len(t)
    p = np.zeros((n, 3))
    v = np.zeros((n, 3))
    a = np.zeros((n, 3))
    p[:, :2] = pos2 @ rot2.T
    v[:, :2] = vel2 @ rot2.T
    a[:, :2] = acc2 @ rot2.T
    if profile.kind is MotionKind.STAIR_CLIMB:
        p[:, 2] = profile.slope * profile.speed * t
        v[:, 2] = profile.slope * profile.speed
    if profile.bob:
        wb = 2.0 * math.pi * profile.bob_freq
        p[:, 2] += profile.bob * np.sin(wb * t)
        v[:, 2] += profile.bob * wb * np.cos(wb * t)
        a[:, 2] += -profile.bob * wb * wb * np.sin(wb * t)
    p += np.asarray(profile.origin, dtype=float)

    wy = 2.0 * math.pi * profile.yaw_sway_freq
    yaw = heading + profile.heading + profile.heading_offset + profile.yaw_sway * np.sin(wy * t)
    yaw_rate = heading_rate + profile.yaw_sway * wy * np.cos(wy * t)
    ws = 2.0 * math.pi * profile.sway_freq
    roll = profile.sway_roll * np.sin(ws * t)
    roll_rate = profile.sway_roll * ws * np.cos(ws * t)
    pitch = profile.sway_pitch * np.sin(2.0 * ws * t)
    pitch_rate = 2.0 * ws * profile.sway_pitch * np.cos(2.0 * ws * t)
    return p, v, a, roll, pitch, yaw, roll_rate, pitch_rate, yaw_rate


def _euler_to_matrices(roll, pitch, yaw) -> np.ndarray:
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    r = np.empty((len(roll), 3, 3))
    r[:, 0, 0] = cy * cp
    r[:, 0, 1] = cy * sp * sr - sy * cr
    r[:, 0, 2] = cy * sp * cr + sy * sr
    r[:, 1, 0] = sy * cp
    r[:, 1, 1] = sy * sp * sr + cy * cr
    r[:, 1, 2] = sy * sp * cr - cy * sr
    r[:, 2, 0] = -sp
    r[:, 2, 1] = cp * sr
    r[:, 2, 2] = cp * cr
    return r


def generate(profile: MotionProfile) -> Trajectory:
    """Sample the analytic trajectory at ``profile.rate`` over ``[0, duration)``."""
    n = int(round(profile.duration * profile.rate))
    if n < 1:
        raise InvalidProfile("duration * rate must give at least one sample")
    t = np.arange(n) / profile.rate
    p, v, a, roll, pitch, yaw, roll_rate, pitch_rate, yaw_rate = kinematics(profile, t)
    r = _euler_to_matrices(roll, pitch, yaw)
    omega = np.empty((n, 3))
    for k in range(n):
        h = so3.euler_rate_jacobian(yaw[k], pitch[k])
        omega[k] = r[k].T @ (h @ np.array([yaw_rate[k], pitch_rate[k], roll_rate[k]]))
    return Trajectory(t, r, p, v, a, omega)


def derive_imu(traj: Trajectory, g=GRAVITY) -> ImuData:
    """Ideal IMU stream whose discrete strapdown integration reproduces ``traj``.

    Each sample carries the interval-averaged rates over ``[t_k, t_k+1]``:
    the attitude increment ``Log(R_k^T R_k+1) / dt`` and the mean world
    acceleration ``(v_k+1 - v_k) / dt``. The last sample repeats the previous
    interval.
    """
    n = len(traj)
    gyro = np.zeros((n, 3))
    acc = np.zeros((n, 3))
    if n == 1:
        _, acc[0] = true_imu_from_kinematics(traj.R[0], np.zeros(3), np.zeros(3), g)
        return ImuData(traj.t.copy(), gyro, acc)
    dts = np.diff(traj.t)
    if np.max(np.abs(dts - dts[0])) > 1e-9 * max(1.0, traj.t[-1]):
        raise ValueError("derive_imu requires uniform timestamps")
    for k in range(n - 1):
        dt = dts[k]
        w = so3.log_so3(traj.R[k].T @ traj.R[k + 1]) / dt
        a_world = (traj.v[k + 1] - traj.v[k]) / dt
        gyro[k], acc[k] = true_imu_from_kinematics(traj.R[k], a_world, w, g)
    _, acc[-1] = true_imu_from_kinematics(
        traj.R[-1], (traj.v[-1] - traj.v[-2]) / dts[-1], gyro[-2], g)
    gyro[-1] = gyro[-2]
    return ImuData(traj.t.copy(), gyro, acc)
