"""Relative-displacement measurements: ground-truth oracle, file ingestion and
gravity-aligned IMU buffers for an external network."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import so3
from .imu import ImuData
from .io import SchemaError, atomic_write_text, format_rows, read_csv
from .simulator import Trajectory

MEAS_COLUMNS = ("t_i", "t_j", "dx", "dy", "dz", "sx", "sy", "sz")

# test-set displacement error std, used as the fixed oracle sigma
DEFAULT_SIGMA = (0.051, 0.051, 0.013)


@dataclass(frozen=True)
class DisplacementMeasurement:
    """Displacement between two states in the gravity-aligned frame of the anchor.

    ``sigma`` holds the per-axis standard deviations; the log-std ``u`` and
    the covariance ``diag(exp(2u))`` are derived from it.
    """

    t_i: float
    t_j: float
    d: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).reshape(3))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float).reshape(3))
        if not self.t_j > self.t_i:
            raise ValueError(f"t_j ({self.t_j}) must be after t_i ({self.t_i})")
        if not np.all(self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def from_log_std(cls, t_i, t_j, d, u) -> "DisplacementMeasurement":
        return cls(t_i, t_j, d, np.exp(np.asarray(u, dtype=float)))

    @property
    def u(self) -> np.ndarray:
        return np.log(self.sigma)

    @property
    def cov(self) -> np.ndarray:
        return np.diag(np.exp(2.0 * self.u))


class OracleMode(str, Enum):
    FIXED_SIGMA = "fixed_sigma"
    HETEROSCEDASTIC = "heteroscedastic"


@dataclass(frozen=True)
class OracleSpec:
    """Noise model of the displacement oracle.

    In heteroscedastic mode the std is ``sigma * (1 + speed_gain * mean_speed)``.
    ``cov_scale`` scales the *reported* covariance only (miscalibration knob).
    Outliers draw their noise with ``outlier_sigma_multiplier`` times the std
    while reporting the nominal covariance.
    """

    mode: OracleMode = OracleMode.FIXED_SIGMA
    sigma: tuple = DEFAULT_SIGMA
    speed_gain: float = 0.5
    outlier_rate: float = 0.0
    outlier_sigma_multiplier: float = 10.0
    cov_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", OracleMode(self.mode))
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))
        if len(self.sigma) != 3 or not all(s > 0 for s in self.sigma):
            raise ValueError("oracle sigma must be three positive numbers")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError("outlier_rate must be in [0, 1)")
        if not self.outlier_sigma_multiplier > 0:
            raise ValueError("outlier_sigma_multiplier must be > 0")
        if not self.cov_scale > 0:
            raise ValueError("cov_scale must be > 0")
        if self.speed_gain < 0:
            raise ValueError("speed_gain must be >= 0")


def true_displacement(traj: Trajectory, t_i: float, t_j: float) -> np.ndarray:
    """``Rz(yaw_i)^T (p_j - p_i)`` from the ground truth."""
    if not t_j > t_i:
        raise ValueError("t_j must be after t_i")
    i = traj.index_at(t_i)
    j = traj.index_at(t_j)
    return so3.yaw_rotation(so3.yaw_of(traj.R[i])).T @ (traj.p[j] - traj.p[i])


def _generating_sigma(traj: Trajectory, t_i: float, t_j: float, spec: OracleSpec) -> np.ndarray:
    sigma = np.array(spec.sigma)
    if spec.mode is OracleMode.HETEROSCEDASTIC:
        i, j = traj.index_at(t_i), traj.index_at(t_j)
        speed = np.linalg.norm(traj.p[j] - traj.p[i]) / (t_j - t_i)
        sigma = sigma * (1.0 + spec.speed_gain * speed)
    return sigma


def sample_measurement(traj: Trajectory, t_i: float, t_j: float, spec: OracleSpec,
                       rng: np.random.Generator) -> DisplacementMeasurement:
    d = true_displacement(traj, t_i, t_j)
    sigma = _generating_sigma(traj, t_i, t_j, spec)
    outlier = rng.random() < spec.outlier_rate
    draw_sigma = sigma * spec.outlier_sigma_multiplier if outlier else sigma
    noise = draw_sigma * rng.standard_normal(3)
    return DisplacementMeasurement(t_i, t_j, d + noise, sigma * math.sqrt(spec.cov_scale))


def schedule(traj: Trajectory, window: float = 1.0, update_freq: float = 20.0):
    """Anchored measurement windows ``(t_i, t_j)`` on the trajectory sample grid.

    The first window ends ``window`` seconds after the start, then one window
    every ``1 / update_freq`` seconds.
    """
    if not (window > 0 and update_freq > 0):
        raise ValueError("window and update_freq must be > 0")
    if len(traj) < 2:
        return []
    rate = 1.0 / traj.dt
    n_win = int(round(window * rate))
    stride = max(1, int(round(rate / update_freq)))
    return [(float(traj.t[j - n_win]), float(traj.t[j]))
            for j in range(n_win, len(traj), stride)]


def simulate_measurements(traj: Trajectory, spec: OracleSpec, rng: np.random.Generator,
                          window: float = 1.0, update_freq: float = 20.0):
    return [sample_measurement(traj, ti, tj, spec, rng) for ti, tj in schedule(traj, window, update_freq)]


def write_measurements(path, meas) -> None:
    rows = np.array([[m.t_i, m.t_j, *m.d, *m.sigma] for m in meas]).reshape(-1, 8)
    atomic_write_text(path, format_rows(MEAS_COLUMNS, rows))


def ingest_measurements(path: str | Path) -> list[DisplacementMeasurement]:
    """Parse and validate a measurement CSV (``t_i,t_j,dx,dy,dz,sx,sy,sz``)."""
    path = Path(path)
    if path.is_file() and path.stat().st_size == 0:
        return []
    data, linenos = read_csv(path, MEAS_COLUMNS, with_lines=True)
    out = []
    last_tj = -math.inf
    for row, lineno in zip(data, linenos):
        if not np.all(row[5:8] > 0):
            raise SchemaError(f"{path}:{lineno}: standard deviations must be > 0, got {row[5:8]}")
        if not row[1] > row[0]:
            raise SchemaError(f"{path}:{lineno}: t_j must be after t_i")
        if row[1] < last_tj:
            raise SchemaError(f"{path}:{lineno}: measurements are not time-ordered")
        last_tj = row[1]
        out.append(DisplacementMeasurement(row[0], row[1], row[2:5], row[5:8]))
    return out


def gravity_aligned_buffer(imu: ImuData, r_anchor: np.ndarray, b_g=None, b_a=None) -> np.ndarray:
    """Rotate an IMU window into the gravity-aligned frame of its first sample.

    The first sample uses ``Rz(yaw)^T R_anchor``; later samples compose this
    with the gyro-integrated relative rotation. Returns ``(N, 6)`` rows of
    ``(gyro, acc)``.
    """
    n = len(imu)
    if n == 0:
        raise ValueError("empty IMU window")
    b_g = np.zeros(3) if b_g is None else np.asarray(b_g, dtype=float)
    b_a = np.zeros(3) if b_a is None else np.asarray(b_a, dtype=float)
    r = so3.yaw_rotation(so3.yaw_of(r_anchor)).T @ r_anchor
    out = np.empty((n, 6))
    for k in range(n):
        w = imu.gyro[k] - b_g
        out[k, :3] = r @ w
        out[k, 3:] = r @ (imu.acc[k] - b_a)
        if k + 1 < n:
            r = r @ so3.exp_so3(w * (imu.t[k + 1] - imu.t[k]))
    return out


@dataclass
class NetInputWindow:
    anchor_t: float
    rate: float
    data: np.ndarray = field(repr=False)


def format_net_input(windows) -> str:
    """Buffers as consecutive blocks, each preceded by a ``#`` header line."""
    lines = ["# blocks of N rows: wx,wy,wz,ax,ay,az in the gravity-aligned anchor frame"]
    for w in windows:
        lines.append(f"# anchor_t={float(w.anchor_t)!r} n={len(w.data)} rate={float(w.rate)!r}")
        lines.extend(",".join("%.17g" % x for x in row) for row in w.data)
    return "\n".join(lines) + "\n"


def write_net_input(path, windows) -> None:
    atomic_write_text(path, format_net_input(windows))


def read_net_input(path) -> list[NetInputWindow]:
    windows = []
    current = None
    with Path(path).open() as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if line.startswith("# anchor_t="):
                fields_ = dict(kv.split("=") for kv in line[2:].split())
                current = (float(fields_["anchor_t"]), float(fields_["rate"]), int(fields_["n"]), [])
                windows.append(current)
            elif line and not line.startswith("#"):
                if current is None:
                    raise SchemaError(f"{path}:{lineno}: data before block header")
                current[3].append([float(x) for x in line.split(",")])
    out = []
    for anchor_t, rate, n, rows in windows:
        arr = np.array(rows).reshape(-1, 6)
        if len(arr) != n:
            raise SchemaError(f"{path}: block at {anchor_t} has {len(arr)} rows, header says {n}")
        out.append(NetInputWindow(anchor_t, rate, arr))
    return out
