"""Trajectory error metrics and statistical-consistency measures.

Trajectories are any objects with ``t (N,)``, ``R (N,3,3)`` and ``p (N,3)``
arrays. Estimate samples are paired with the ground-truth sample nearest in
time, within half of the ground-truth sample period; nothing is interpolated
and no alignment transform is applied.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import chi2

from . import so3
from .ekf import CHI2_99_3DOF

LOG_2PI = math.log(2.0 * math.pi)


class MetricError(ValueError):
    pass


@dataclass
class Aligned:
    """Paired samples from an estimate and its ground truth."""

    t: np.ndarray
    p_est: np.ndarray
    p_gt: np.ndarray
    R_est: np.ndarray
    R_gt: np.ndarray
    gt_index: np.ndarray
    tol: float


def _period(t: np.ndarray) -> float:
    return float(np.median(np.diff(t))) if len(t) > 1 else 0.0


def align(est, gt, tol: float | None = None) -> Aligned:
    gt_t = np.asarray(gt.t, dtype=float)
    est_t = np.asarray(est.t, dtype=float)
    if tol is None:
        tol = 0.5 * _period(gt_t) if len(gt_t) > 1 else 1e-9
    if len(gt_t) == 0 or len(est_t) == 0:
        raise MetricError("empty trajectory")
    k = np.clip(np.searchsorted(gt_t, est_t), 1, len(gt_t) - 1) if len(gt_t) > 1 else np.zeros(len(est_t), int)
    if len(gt_t) > 1:
        left = k - 1
        k = np.where(np.abs(gt_t[left] - est_t) <= np.abs(gt_t[k] - est_t), left, k)
    ok = np.abs(gt_t[k] - est_t) <= tol + 1e-12
    if not np.any(ok):
        raise MetricError("estimate and ground truth do not overlap in time")
    e_idx = np.flatnonzero(ok)
    g_idx = k[ok]
    return Aligned(est_t[e_idx], np.asarray(est.p)[e_idx], np.asarray(gt.p)[g_idx],
                   np.asarray(est.R)[e_idx], np.asarray(gt.R)[g_idx], g_idx, tol)


def _rmse(x: np.ndarray) -> float:
    if x.size == 0:
        raise MetricError("no samples to evaluate")
    return float(np.sqrt(np.mean(x ** 2)))


def ate(est, gt) -> float:
    """RMS position error over time-aligned samples."""
    a = align(est, gt)
    return _rmse(np.linalg.norm(a.p_est - a.p_gt, axis=1))


def _yaws(rs: np.ndarray):
    """Yaw per rotation with a mask for samples at gimbal lock."""
    cos_pitch = np.hypot(rs[:, 0, 0], rs[:, 1, 0])
    valid = cos_pitch > so3.GIMBAL_TOL
    return np.arctan2(rs[:, 1, 0], rs[:, 0, 0]), valid


def _window_pairs(t: np.ndarray, delta: float, tol: float):
    """Index pairs ``(i, j)`` with ``t_j - t_i`` equal to ``delta`` within ``tol``."""
    j = np.searchsorted(t, t + delta - tol)
    ok = j < len(t)
    i = np.flatnonzero(ok)
    j = j[ok]
    good = np.abs(t[j] - t[i] - delta) <= tol + 1e-12
    return i[good], j[good]


def rte(est, gt, delta: float = 1.0) -> float:
    """RMS over all windows of length ``delta`` of the yaw-aligned relative displacement error."""
    a = align(est, gt)
    i, j = _window_pairs(a.t, delta, a.tol)
    if i.size == 0:
        raise MetricError(f"no windows of {delta} s in the overlap")
    yaw_gt, v1 = _yaws(a.R_gt)
    yaw_est, v2 = _yaws(a.R_est)
    keep = v1[i] & v2[i]
    i, j = i[keep], j[keep]
    rel = yaw_gt[i] - yaw_est[i]
    c, s = np.cos(rel), np.sin(rel)
    de = a.p_est[j] - a.p_est[i]
    rot = np.column_stack([c * de[:, 0] - s * de[:, 1], s * de[:, 0] + c * de[:, 1], de[:, 2]])
    err = (a.p_gt[j] - a.p_gt[i]) - rot
    return _rmse(np.linalg.norm(err, axis=1))


def path_length(p: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def dr(est, gt) -> float:
    """Final position error as a percentage of the ground-truth distance travelled."""
    a = align(est, gt)
    gi = a.gt_index
    length = path_length(np.asarray(gt.p)[gi[0]:gi[-1] + 1])
    if not length > 0:
        raise MetricError("ground-truth path length is zero")
    return 100.0 * float(np.linalg.norm(a.p_est[-1] - a.p_gt[-1])) / length


def _yaw_errors(a: Aligned):
    yaw_gt, v1 = _yaws(a.R_gt)
    yaw_est, v2 = _yaws(a.R_est)
    valid = v1 & v2
    return yaw_gt, yaw_est, valid


def aye(est, gt) -> float:
    """RMS of the wrapped yaw error, degrees."""
    a = align(est, gt)
    yg, ye, valid = _yaw_errors(a)
    return math.degrees(_rmse(so3.wrap_angle(yg[valid] - ye[valid])))


def rye(est, gt, delta: float = 1.0) -> float:
    """RMS over windows of the wrapped yaw-change error, degrees."""
    a = align(est, gt)
    yg, ye, valid = _yaw_errors(a)
    i, j = _window_pairs(a.t, delta, a.tol)
    keep = valid[i] & valid[j]
    i, j = i[keep], j[keep]
    if i.size == 0:
        raise MetricError(f"no windows of {delta} s in the overlap")
    err = so3.wrap_angle((yg[j] - yg[i]) - (ye[j] - ye[i]))
    return math.degrees(_rmse(np.asarray(err)))


def yaw_dr(est, gt) -> float:
    """Signed yaw drift over the duration, degrees per hour.

    The drift is the change of the yaw error between the first and last
    samples, so a constant heading offset does not count. The error series is
    unwrapped in time so drifts beyond half a turn keep their magnitude.
    """
    a = align(est, gt)
    yg, ye, valid = _yaw_errors(a)
    t = a.t[valid]
    if t.size < 2 or not t[-1] > t[0]:
        raise MetricError("yaw drift needs a positive duration")
    err = np.unwrap(np.asarray(so3.wrap_angle(yg[valid] - ye[valid])))
    return math.degrees(float(err[-1] - err[0])) / (t[-1] - t[0]) * 3600.0


def gimbal_skips(est, gt) -> int:
    a = align(est, gt)
    return int(np.count_nonzero(~_yaw_errors(a)[2]))


def _as_cov(covs, n: int) -> np.ndarray:
    c = np.asarray(covs, dtype=float)
    if c.shape == (n, 3):
        c = np.einsum("ni,ij->nij", c, np.eye(3))
    if c.shape != (n, 3, 3):
        raise MetricError(f"covariances must be (N,3) variances or (N,3,3), got {c.shape}")
    return c


def _quad_and_logdet(errors, covs):
    e = np.asarray(errors, dtype=float)
    if e.ndim != 2 or e.shape[0] == 0:
        raise MetricError("errors must be a non-empty (N, d) array")
    n, d = e.shape
    c = _as_cov(covs, n) if d == 3 else np.asarray(covs, dtype=float)
    if c.shape != (n, d, d):
        raise MetricError(f"covariances must be ({n},{d},{d})")
    try:
        chol = np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        raise MetricError("covariance is not positive definite") from None
    z = np.linalg.solve(chol, e[:, :, None])[:, :, 0]
    quad = np.sum(z * z, axis=1)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return quad, logdet


def nll(errors, covs) -> float:
    """Mean Gaussian negative log-likelihood, constant term included."""
    quad, logdet = _quad_and_logdet(errors, covs)
    d = np.asarray(errors).shape[1]
    return float(np.mean(0.5 * logdet + 0.5 * quad + 0.5 * d * LOG_2PI))


def mahalanobis_sq(errors, covs) -> np.ndarray:
    return _quad_and_logdet(errors, covs)[0]


def mahalanobis_outlier_frac(errors, covs, critical: float = CHI2_99_3DOF) -> float:
    return float(np.mean(mahalanobis_sq(errors, covs) > critical))


def nees(errors, covs) -> float:
    """Mean of ``dx^T P^-1 dx``."""
    return float(np.mean(mahalanobis_sq(errors, covs)))


def nees_series(errors, covs) -> np.ndarray:
    return mahalanobis_sq(errors, covs)


@dataclass
class MetricsReport:
    ate: float
    rte: float
    dr: float | None  # None when the ground truth does not move
    aye: float
    rye: float
    yaw_dr: float  # magnitude, deg/hour
    yaw_dr_signed: float
    nll: float | None = None
    mahalanobis_outlier_frac: float | None = None
    nees_mean: float | None = None
    delta: float = 1.0
    gimbal_skipped: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def trajectory_report(est, gt, delta: float = 1.0) -> MetricsReport:
    ydr = yaw_dr(est, gt)
    try:
        drift = dr(est, gt)
    except MetricError:
        drift = None
    return MetricsReport(
        ate=ate(est, gt), rte=rte(est, gt, delta), dr=drift,
        aye=aye(est, gt), rye=rye(est, gt, delta),
        yaw_dr=abs(ydr), yaw_dr_signed=ydr, delta=delta,
        gimbal_skipped=gimbal_skips(est, gt))


def drift_reduction_pct(filter_value: float, baseline_value: float) -> float:
    """Percentage by which ``filter_value`` is below ``baseline_value``."""
    if baseline_value == 0:
        return 0.0
    return 100.0 * (baseline_value - filter_value) / baseline_value


def chi2_envelope(dof: int, runs: int, level: float = 0.95) -> tuple[float, float]:
    """Two-sided bounds on a mean of ``runs`` independent chi2(``dof``) values."""
    lo = chi2.ppf(0.5 * (1.0 - level), dof * runs) / runs
    hi = chi2.ppf(0.5 * (1.0 + level), dof * runs) / runs
    return float(lo), float(hi)
