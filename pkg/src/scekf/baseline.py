"""Displacement-concatenation baseline: an AHRS attitude filter supplies the
heading and each measured displacement is chained in that heading frame.

This estimator never sees the EKF state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import so3
from .ekf import EST_COLUMNS
from .imu import ImuData, ImuSample
from .io import format_rows

DEFAULT_ACCEL_GAIN = 0.005


class MissingYaw(LookupError):
    """No attitude sample close enough to a measurement time."""


@dataclass
class AhrsState:
    R: np.ndarray
    t: float = 0.0
    accel_gain: float = DEFAULT_ACCEL_GAIN

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        if not so3.is_rotation(self.R, 1e-6):
            raise ValueError("AHRS attitude is not a rotation matrix")
        if not 0.0 <= self.accel_gain < 1.0:
            raise ValueError("accel_gain must be in [0, 1)")


def tilt_from_accel(acc) -> tuple[float, float]:
    """Roll and pitch that explain a specific-force reading taken at rest."""
    ax, ay, az = float(acc[0]), float(acc[1]), float(acc[2])
    return math.atan2(ay, az), math.atan2(-ax, math.hypot(ay, az))


def ahrs_step(state: AhrsState, s: ImuSample, dt: float) -> AhrsState:
    """Gyro integration followed by a partial tilt correction toward gravity.

    Heading is carried through untouched.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    r = state.R @ so3.exp_so3(np.asarray(s.gyro, dtype=float) * dt)
    if state.accel_gain > 0.0 and np.linalg.norm(s.acc) > 0.0:
        try:
            e = so3.decompose_euler_xyz(r)
        except so3.GimbalLock:
            return AhrsState(r, state.t + dt, state.accel_gain)
        roll_m, pitch_m = tilt_from_accel(s.acc)
        k = state.accel_gain
        roll = e.roll + k * so3.wrap_angle(roll_m - e.roll)
        pitch = e.pitch + k * (pitch_m - e.pitch)
        r = so3.compose_euler_xyz(roll, pitch, e.yaw)
    return AhrsState(r, state.t + dt, state.accel_gain)


def run_ahrs(imu: ImuData, r0: np.ndarray, accel_gain: float = DEFAULT_ACCEL_GAIN):
    """Attitude at every IMU timestamp; sample ``k`` drives ``t_k -> t_k+1``."""
    n = len(imu)
    out = np.empty((n, 3, 3))
    st = AhrsState(r0, float(imu.t[0]) if n else 0.0, accel_gain)
    if n:
        out[0] = st.R
    for k in range(n - 1):
        st = ahrs_step(st, imu[k], float(imu.t[k + 1] - imu.t[k]))
        out[k + 1] = st.R
    return out


class ConcatMode(str, Enum):
    SCALING = "scaling"
    PARTITION = "partition"


@dataclass
class YawStream:
    """Heading samples with nearest-timestamp lookup."""

    t: np.ndarray
    yaw: np.ndarray
    tol: float

    def at(self, t: float) -> float:
        k = int(np.searchsorted(self.t, t))
        best = None
        for c in (k - 1, k):
            if 0 <= c < len(self.t) and (best is None or abs(self.t[c] - t) < abs(self.t[best] - t)):
                best = c
        if best is None or abs(self.t[best] - t) > self.tol:
            raise MissingYaw(f"no heading sample within {self.tol:g} s of t={t:.6f}")
        return float(self.yaw[best])


def _partition(meas):
    """Greedy chain of windows where each starts where the previous ended."""
    chain = []
    end = None
    for m in sorted(meas, key=lambda m: (m.t_i, m.t_j)):
        if end is None or abs(m.t_i - end) < 1e-9:
            chain.append(m)
            end = m.t_j
    return chain


def concatenate(meas, yaw: YawStream, p0, mode: ConcatMode = ConcatMode.SCALING):
    """Chain displacements in the heading frame at each window start.

    ``partition`` keeps only back-to-back windows and returns positions at
    their end times, starting with ``p0`` at the first start time.
    ``scaling`` uses every window: the first one puts the estimate at its
    midpoint, and every later window adds its displacement times
    ``(spacing of window ends) / (window length)``; positions are stamped at
    window midpoints.
    """
    p = np.asarray(p0, dtype=float).reshape(3).copy()
    mode = ConcatMode(mode)
    if not meas:
        return np.zeros(0), np.zeros((0, 3))
    if mode is ConcatMode.PARTITION:
        chain = _partition(meas)
        times = [chain[0].t_i]
        pos = [p.copy()]
        for m in chain:
            p = p + so3.yaw_rotation(yaw.at(m.t_i)) @ m.d
            times.append(m.t_j)
            pos.append(p.copy())
        return np.array(times), np.array(pos)
    ordered = sorted(meas, key=lambda m: (m.t_j, m.t_i))
    first = ordered[0]
    p = p + 0.5 * (so3.yaw_rotation(yaw.at(first.t_i)) @ first.d)
    times = [0.5 * (first.t_i + first.t_j)]
    pos = [p.copy()]
    for prev, m in zip(ordered, ordered[1:]):
        scale = (m.t_j - prev.t_j) / (m.t_j - m.t_i)
        p = p + scale * (so3.yaw_rotation(yaw.at(m.t_i)) @ m.d)
        times.append(0.5 * (m.t_i + m.t_j))
        pos.append(p.copy())
    return np.array(times), np.array(pos)


@dataclass
class BaselineResult:
    t: np.ndarray
    R: np.ndarray
    p: np.ndarray
    ahrs_t: np.ndarray = field(repr=False, default=None)
    ahrs_R: np.ndarray = field(repr=False, default=None)

    def est_rows(self) -> np.ndarray:
        n = len(self.t)
        zeros = np.zeros((n, 3))
        return np.column_stack([self.t, self.R.reshape(-1, 9), zeros, self.p, zeros, zeros,
                                np.zeros((n, 15))])

    def est_csv_text(self) -> str:
        return format_rows(EST_COLUMNS, self.est_rows())


def run_baseline(imu: ImuData, meas, r0, p0, accel_gain: float = DEFAULT_ACCEL_GAIN,
                 mode: ConcatMode = ConcatMode.SCALING) -> BaselineResult:
    """AHRS over the whole IMU stream, then concatenation of ``meas``."""
    rs = run_ahrs(imu, r0, accel_gain)
    dt = float(np.median(np.diff(imu.t))) if len(imu) > 1 else 1.0
    yaws = np.array([so3.yaw_of(r) for r in rs])
    ys = YawStream(imu.t, yaws, 0.5 * dt)
    t, p = concatenate(meas, ys, p0, mode)
    idx = [int(np.argmin(np.abs(imu.t - tk))) for tk in t]
    for k, tk in zip(idx, t):
        if abs(imu.t[k] - tk) > 0.5 * dt:
            raise MissingYaw(f"no attitude sample near t={tk:.6f}")
    return BaselineResult(t, rs[idx] if idx else np.zeros((0, 3, 3)), p, imu.t, rs)
