"""IMU sensor model: bias, white noise and bias random walk."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRAVITY = np.array([0.0, 0.0, -9.81])

IMU_COLUMNS = ("t", "wx", "wy", "wz", "ax", "ay", "az")


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray  # rad/s, IMU frame
    acc: np.ndarray  # m/s^2 specific force, IMU frame


@dataclass(frozen=True)
class ImuNoiseSpec:
    """Per-sample discrete standard deviations.

    ``sigma_bg`` and ``sigma_ba`` are the std of one bias random-walk step.
    """

    sigma_g: float = 1e-3
    sigma_a: float = 1e-2
    sigma_bg: float = 1e-5
    sigma_ba: float = 1e-4
    dt: float = 1.0 / 200.0

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be >= 0")
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")

    @classmethod
    def noiseless(cls, dt: float = 1.0 / 200.0) -> "ImuNoiseSpec":
        return cls(0.0, 0.0, 0.0, 0.0, dt)

    def covariance(self) -> np.ndarray:
        """12x12 diagonal W ordered (gyro noise, accel noise, gyro walk, accel walk)."""
        d = np.repeat([self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba], 3)
        return np.diag(d**2)


@dataclass
class BiasState:
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class ImuData:
    """A stream of IMU samples stored column-wise."""

    t: np.ndarray  # (N,)
    gyro: np.ndarray  # (N, 3)
    acc: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.acc = np.asarray(self.acc, dtype=float).reshape(-1, 3)
        if not (len(self.t) == len(self.gyro) == len(self.acc)):
            raise ValueError("IMU columns have different lengths")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise ValueError("IMU timestamps must be strictly increasing")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.gyro))
                and np.all(np.isfinite(self.acc))):
            raise ValueError("IMU stream contains non-finite values")

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> ImuSample:
        return ImuSample(float(self.t[k]), self.gyro[k].copy(), self.acc[k].copy())

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @classmethod
    def from_samples(cls, samples) -> "ImuData":
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.array([s.t for s in samples]),
            np.array([s.gyro for s in samples]),
            np.array([s.acc for s in samples]),
        )

    def to_csv(self, path) -> None:
        from .io import write_csv

        write_csv(path, IMU_COLUMNS, np.column_stack([self.t, self.gyro, self.acc]))

    @classmethod
    def from_csv(cls, path: str | Path) -> "ImuData":
        from .io import read_csv

        data = read_csv(path, IMU_COLUMNS)
        try:
            return cls(data[:, 0], data[:, 1:4], data[:, 4:7])
        except ValueError as exc:
            from .io import SchemaError

            raise SchemaError(f"{path}: {exc}") from exc


def true_imu_from_kinematics(r: np.ndarray, a_world, omega_body, g=GRAVITY):
    """Ideal gyro and accelerometer readings for a given world acceleration.

    Returns ``(omega_true, a_true)`` with ``a_true = R^T (a_world - g)``.
    """
    a_true = r.T @ (np.asarray(a_world, dtype=float) - np.asarray(g, dtype=float))
    return np.asarray(omega_body, dtype=float).copy(), a_true


def corrupt(sample: ImuSample, bias: BiasState, spec: ImuNoiseSpec, rng: np.random.Generator):
    """Add bias and white noise to one sample, then advance the bias random walk."""
    gyro = sample.gyro + bias.b_g + spec.sigma_g * rng.standard_normal(3)
    acc = sample.acc + bias.b_a + spec.sigma_a * rng.standard_normal(3)
    new_bias = BiasState(
        bias.b_g + spec.sigma_bg * rng.standard_normal(3),
        bias.b_a + spec.sigma_ba * rng.standard_normal(3),
    )
    return ImuSample(sample.t, gyro, acc), new_bias


def corrupt_stream(imu: ImuData, bias: BiasState, spec: ImuNoiseSpec, rng: np.random.Generator):
    """Vectorized :func:`corrupt` over a whole stream.

    Returns the corrupted stream, the true bias applied at each sample
    ``(b_g (N,3), b_a (N,3))`` and the bias state after the last sample.
    """
    n = len(imu)
    n_g = spec.sigma_g * rng.standard_normal((n, 3))
    n_a = spec.sigma_a * rng.standard_normal((n, 3))
    walk_g = spec.sigma_bg * rng.standard_normal((n, 3))
    walk_a = spec.sigma_ba * rng.standard_normal((n, 3))
    # bias used at sample k includes the walk steps 0..k-1
    b_g = bias.b_g + np.vstack([np.zeros((1, 3)), np.cumsum(walk_g, axis=0)])
    b_a = bias.b_a + np.vstack([np.zeros((1, 3)), np.cumsum(walk_a, axis=0)])
    out = ImuData(imu.t.copy(), imu.gyro + b_g[:n] + n_g, imu.acc + b_a[:n] + n_a)
    return out, (b_g[:n], b_a[:n]), BiasState(b_g[n].copy(), b_a[n].copy())
