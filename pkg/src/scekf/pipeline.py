"""End-to-end helpers: simulate a sequence, run the estimators, score them."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import baseline, ekf, metrics, so3
from .displacement import OracleSpec, simulate_measurements
from .imu import BiasState, ImuData, ImuNoiseSpec, corrupt_stream
from .simulator import MotionProfile, Trajectory, derive_imu, generate


@dataclass
class Sequence:
    """One simulated recording and everything needed to score estimates on it."""

    traj: Trajectory
    imu: ImuData
    meas: list
    true_bg: np.ndarray  # (N,3) bias applied at each IMU sample
    true_ba: np.ndarray

    def true_nav(self, k: int = 0) -> ekf.NavState:
        return ekf.NavState(self.traj.R[k].copy(), self.traj.v[k].copy(), self.traj.p[k].copy(),
                            self.true_bg[k].copy(), self.true_ba[k].copy(), float(self.traj.t[k]))


def _streams(seed: int):
    """Independent generators for IMU noise, oracle noise and initial errors."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def simulate(profile: MotionProfile, noise: ImuNoiseSpec, oracle: OracleSpec, seed: int,
             bias: BiasState | None = None, window: float = 1.0, update_freq: float = 20.0) -> Sequence:
    traj = generate(profile)
    clean = derive_imu(traj)
    rng_imu, rng_meas, _ = _streams(seed)
    bias = BiasState() if bias is None else bias
    imu, (b_g, b_a), _ = corrupt_stream(clean, bias, noise, rng_imu)
    meas = simulate_measurements(traj, oracle, rng_meas, window, update_freq)
    return Sequence(traj, imu, meas, b_g, b_a)


def perturb(nav: ekf.NavState, dx: np.ndarray) -> ekf.NavState:
    """Estimate whose error ``true - estimate`` is ``dx`` (15-vector)."""
    dx = np.asarray(dx, dtype=float)
    return ekf.NavState(so3.exp_so3(-dx[0:3]) @ nav.R, nav.v - dx[3:6], nav.p - dx[6:9],
                        nav.b_g - dx[9:12], nav.b_a - dx[12:15], nav.t)


def sample_initial_error(config: ekf.FilterConfig, seed: int) -> np.ndarray:
    rng = _streams(seed)[2]
    return config.initial_sigmas() * rng.standard_normal(15)


def error_state(seq: Sequence, k: int, nav: ekf.NavState) -> np.ndarray:
    """15-dim error ``true - estimate`` at IMU sample ``k``."""
    r_true = seq.traj.R[k]
    return np.concatenate([
        so3.log_so3(r_true @ nav.R.T),
        seq.traj.v[k] - nav.v,
        seq.traj.p[k] - nav.p,
        seq.true_bg[k] - nav.b_g,
        seq.true_ba[k] - nav.b_a,
    ])


def result_nav(res: ekf.RunResult, k: int) -> ekf.NavState:
    return ekf.NavState(res.R[k], res.v[k], res.p[k], res.b_g[k], res.b_a[k], float(res.t[k]))


@dataclass
class ConsistencyStats:
    nees_times: np.ndarray
    nees: np.ndarray  # per evaluation epoch
    accepted: int
    gated: int
    nis: np.ndarray = field(repr=False)

    @property
    def gate_pass_rate(self) -> float:
        total = self.accepted + self.gated
        return self.accepted / total if total else float("nan")


def consistency(seq: Sequence, res: ekf.RunResult, every: float = 1.0, skip: float = 1.0) -> ConsistencyStats:
    """NEES of the current error state at covariance snapshots spaced ``every`` seconds."""
    times = np.asarray(res.cov_times)
    t0 = float(seq.imu.t[0])
    picked = []
    next_t = t0 + skip
    for n, t in enumerate(times):
        if t >= next_t - 1e-9:
            picked.append(n)
            next_t = t + every
    errs, covs, ts = [], [], []
    for n in picked:
        k = int(np.argmin(np.abs(seq.imu.t - times[n])))
        errs.append(error_state(seq, k, result_nav(res, k)))
        covs.append(res.cov_snapshots[n])
        ts.append(times[n])
    nees = metrics.nees_series(np.array(errs), np.array(covs)) if errs else np.zeros(0)
    status = [d["status"] for d in res.diagnostics]
    nis = np.array([d["nis"] for d in res.diagnostics if d["nis"] is not None])
    return ConsistencyStats(np.array(ts), nees, status.count("accepted"), status.count("gated"), nis)


def run_filter(seq: Sequence, config: ekf.FilterConfig, init_error=None,
               init_bias_estimate: bool = False, check_psd: bool = False) -> ekf.RunResult:
    """Filter run started from ground truth, offset by ``init_error``.

    Bias estimates start at zero unless ``init_bias_estimate`` is set.
    """
    nav = seq.true_nav(0)
    if not init_bias_estimate:
        nav = replace(nav, b_g=np.zeros(3), b_a=np.zeros(3))
    if init_error is not None:
        nav = perturb(nav, init_error)
    return ekf.run(seq.imu, seq.meas, config, nav, check_psd=check_psd)


def run_baseline(seq: Sequence, accel_gain: float = baseline.DEFAULT_ACCEL_GAIN,
                 mode: baseline.ConcatMode = baseline.ConcatMode.SCALING) -> baseline.BaselineResult:
    return baseline.run_baseline(seq.imu, seq.meas, seq.traj.R[0], seq.traj.p[0], accel_gain, mode)
