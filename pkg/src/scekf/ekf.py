"""Stochastic-cloning error-state EKF fusing strapdown IMU propagation with
relative displacement measurements.

Error-state layout (dimension ``6 m + 15``)::

    clone 1 [theta(3), p(3)], ..., clone m [theta(3), p(3)],
    current [theta(3), v(3), p(3), b_g(3), b_a(3)]

Errors are ``true - estimate`` for vectors and ``R_true = Exp(theta) R_hat``
for rotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import so3
from .displacement import DisplacementMeasurement
from .imu import GRAVITY, ImuData, ImuNoiseSpec, ImuSample
from .io import format_rows

CURRENT_DIM = 15
CLONE_DIM = 6
# offsets inside the current block
TH, VEL, POS, BG, BA = 0, 3, 6, 9, 12

CHI2_99_3DOF = 11.345


class NumericalError(RuntimeError):
    """Covariance lost symmetry/positive semi-definiteness."""


@dataclass
class NavState:
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def copy(self) -> "NavState":
        return NavState(self.R.copy(), self.v.copy(), self.p.copy(),
                        self.b_g.copy(), self.b_a.copy(), self.t)


@dataclass
class CloneState:
    R: np.ndarray
    p: np.ndarray
    t: float


@dataclass
class FilterState:
    clones: list
    nav: NavState
    P: np.ndarray

    @property
    def dim(self) -> int:
        return CLONE_DIM * len(self.clones) + CURRENT_DIM

    @property
    def current_offset(self) -> int:
        return CLONE_DIM * len(self.clones)

    def current_cov(self) -> np.ndarray:
        o = self.current_offset
        return self.P[o:, o:]

    def copy(self) -> "FilterState":
        return FilterState(
            [CloneState(c.R.copy(), c.p.copy(), c.t) for c in self.clones],
            self.nav.copy(), self.P.copy())


@dataclass(frozen=True)
class FilterConfig:
    """Filter tuning.

    Defaults: chi-square gate at the 99th percentile of 3 dof, measurement
    covariance inflated by 10, initial sigmas v 0.1 m/s, b_a 0.2 m/s^2,
    b_g 1e-4 rad/s, attitude (10, 10, 0.1) deg.
    """

    g: tuple = tuple(GRAVITY)
    noise: ImuNoiseSpec = field(default_factory=ImuNoiseSpec)
    chi2_threshold: float = CHI2_99_3DOF
    meas_cov_scale: float = 10.0
    update_freq: float = 20.0
    window: float = 1.0
    sigma_v: float = 0.1
    sigma_ba: float = 0.2
    sigma_bg: float = 1e-4
    sigma_theta_deg: tuple = (10.0, 10.0, 0.1)
    sigma_p: float = 1e-6
    combine_propagation: bool = True

    def __post_init__(self):
        if not self.chi2_threshold > 0:
            raise ValueError("chi2_threshold must be > 0")
        if not self.meas_cov_scale >= 1.0:
            raise ValueError("meas_cov_scale must be >= 1")
        if not (self.update_freq > 0 and self.window > 0):
            raise ValueError("update_freq and window must be > 0")
        for name in ("sigma_v", "sigma_ba", "sigma_bg", "sigma_p"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if len(self.sigma_theta_deg) != 3 or len(self.g) != 3:
            raise ValueError("sigma_theta_deg and g must have three entries")

    def initial_sigmas(self) -> np.ndarray:
        """Std of the 15-dim current error state used by :func:`initialize`."""
        return np.concatenate([
            np.radians(self.sigma_theta_deg),
            np.full(3, self.sigma_v),
            np.full(3, self.sigma_p),
            np.full(3, self.sigma_bg),
            np.full(3, self.sigma_ba),
        ])


class UpdateStatus(str, Enum):
    ACCEPTED = "accepted"
    GATED = "gated"
    GIMBAL_LOCK = "gimbal_lock"
    SINGULAR = "singular"
    NO_CLONE = "no_clone"


@dataclass
class UpdateOutcome:
    status: UpdateStatus
    innovation: np.ndarray | None = None
    nis: float | None = None

    @property
    def accepted(self) -> bool:
        return self.status is UpdateStatus.ACCEPTED


def initialize(config: FilterConfig, init_nav: NavState) -> FilterState:
    """Filter with no clones and a diagonal prior on the current state."""
    p0 = np.diag(config.initial_sigmas() ** 2)
    return FilterState([], init_nav.copy(), p0)


def propagate_mean(nav: NavState, s: ImuSample, dt: float, g=GRAVITY) -> NavState:
    """One strapdown step with bias-corrected IMU sample ``s``."""
    g = np.asarray(g, dtype=float)
    acc_w = nav.R @ (s.acc - nav.b_a)
    return NavState(
        R=nav.R @ so3.exp_so3((s.gyro - nav.b_g) * dt),
        v=nav.v + (g + acc_w) * dt,
        p=nav.p + nav.v * dt + 0.5 * dt * dt * (g + acc_w),
        b_g=nav.b_g.copy(),
        b_a=nav.b_a.copy(),
        t=nav.t + dt,
    )


def propagation_jacobians(nav: NavState, s: ImuSample, dt: float):
    """Linearized error propagation ``x+ = A x + B n_imu + C eta`` around ``nav``.

    Returns ``A (15,15)``, ``B (15,6)`` for the gyro/accel white noise
    (as additive perturbations of the measured input) and ``C (15,6)`` for
    the bias random-walk steps.
    """
    phi = (s.gyro - nav.b_g) * dt
    r_next = nav.R @ so3.exp_so3(phi)
    rjr = r_next @ so3.right_jacobian(phi) * dt
    sk = so3.skew(nav.R @ (s.acc - nav.b_a))
    rdt = nav.R * dt
    a = _EYE15.copy()
    a[TH:TH + 3, BG:BG + 3] = -rjr
    a[VEL:VEL + 3, TH:TH + 3] = -sk * dt
    a[VEL:VEL + 3, BA:BA + 3] = -rdt
    a[POS:POS + 3, TH:TH + 3] = -0.5 * dt * dt * sk
    a[POS:POS + 3, VEL:VEL + 3] = _EYE3 * dt
    a[POS:POS + 3, BA:BA + 3] = -0.5 * dt * rdt
    b = np.zeros((CURRENT_DIM, 6))
    b[TH:TH + 3, 0:3] = rjr
    b[VEL:VEL + 3, 3:6] = rdt
    b[POS:POS + 3, 3:6] = 0.5 * dt * rdt
    return a, b, _C_WALK.copy()


_EYE3 = np.eye(3)
_EYE15 = np.eye(CURRENT_DIM)
_C_WALK = np.zeros((CURRENT_DIM, 6))
_C_WALK[BG:BG + 3, 0:3] = np.eye(3)
_C_WALK[BA:BA + 3, 3:6] = np.eye(3)


def _fused_step(nav: NavState, gyro: np.ndarray, acc: np.ndarray, dt: float, g: np.ndarray):
    """:func:`propagate_mean` and :func:`propagation_jacobians` sharing one ``Exp``."""
    phi = (gyro - nav.b_g) * dt
    d_r = so3.exp_so3(phi)
    r_next = nav.R @ d_r
    acc_w = nav.R @ (acc - nav.b_a)
    lin = g + acc_w
    nxt = NavState(r_next, nav.v + lin * dt, nav.p + nav.v * dt + (0.5 * dt * dt) * lin,
                   nav.b_g, nav.b_a, nav.t + dt)
    rjr = r_next @ so3.right_jacobian(phi) * dt
    sk = so3.skew(acc_w)
    rdt = nav.R * dt
    a = _EYE15.copy()
    a[TH:TH + 3, BG:BG + 3] = -rjr
    a[VEL:VEL + 3, TH:TH + 3] = -sk * dt
    a[VEL:VEL + 3, BA:BA + 3] = -rdt
    a[POS:POS + 3, TH:TH + 3] = (-0.5 * dt * dt) * sk
    a[POS:POS + 3, VEL:VEL + 3] = _EYE3 * dt
    a[POS:POS + 3, BA:BA + 3] = (-0.5 * dt) * rdt
    gn = np.zeros((CURRENT_DIM, 12))
    gn[TH:TH + 3, 0:3] = rjr
    gn[VEL:VEL + 3, 3:6] = rdt
    gn[POS:POS + 3, 3:6] = (0.5 * dt) * rdt
    gn[BG:BG + 3, 6:9] = _EYE3
    gn[BA:BA + 3, 9:12] = _EYE3
    return nxt, a, gn


def _noise_gain(b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.hstack([b, c])


def symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def propagate_covariance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray,
                         w: np.ndarray) -> np.ndarray:
    """``P <- diag(I, A) P diag(I, A)^T + [0; G] W [0; G]^T`` with ``G = [B C]``."""
    n = p.shape[0]
    if p.shape != (n, n) or n < CURRENT_DIM or (n - CURRENT_DIM) % CLONE_DIM:
        raise ValueError(f"covariance has invalid shape {p.shape}")
    if a.shape != (CURRENT_DIM, CURRENT_DIM) or w.shape != (12, 12):
        raise ValueError("propagation matrices have invalid shape")
    g = _noise_gain(b, c)
    o = n - CURRENT_DIM
    out = p.copy()
    out[o:, o:] = a @ p[o:, o:] @ a.T + g @ w @ g.T
    out[:o, o:] = p[:o, o:] @ a.T
    out[o:, :o] = out[:o, o:].T
    return symmetrize(out)


def propagate(state: FilterState, s: ImuSample, dt: float, config: FilterConfig) -> FilterState:
    """Mean and covariance propagation of the current state by one IMU sample."""
    a, b, c = propagation_jacobians(state.nav, s, dt)
    nav = propagate_mean(state.nav, s, dt, config.g)
    p = propagate_covariance(state.P, a, b, c, config.noise.covariance())
    return FilterState(list(state.clones), nav, p)


def augment(state: FilterState, sample: ImuSample | None = None, dt: float | None = None,
            config: FilterConfig | None = None) -> FilterState:
    """Append a clone of the current pose.

    Without ``sample`` this is the pure copy operation at the current time.
    With ``sample`` the current state is first propagated by one IMU step and
    the clone is created from the propagated pose in the same linear map,
    using the attitude and position rows of the propagation matrices.
    """
    m6 = state.current_offset
    n = state.dim
    clones = list(state.clones)
    if sample is None:
        idx = (list(range(m6)) + [m6 + TH + k for k in range(3)] + [m6 + POS + k for k in range(3)]
               + list(range(m6, n)))
        p = state.P[np.ix_(idx, idx)]
        nav = state.nav.copy()
    else:
        if dt is None or config is None:
            raise ValueError("propagation with cloning needs dt and config")
        a, b, c = propagation_jacobians(state.nav, sample, dt)
        g = _noise_gain(b, c)
        rows = list(range(TH, TH + 3)) + list(range(POS, POS + 3))
        jbar = np.zeros((n + CLONE_DIM, n))
        jbar[:m6, :m6] = np.eye(m6)
        jbar[m6:m6 + CLONE_DIM, m6:] = a[rows]
        jbar[m6 + CLONE_DIM:, m6:] = a
        gbar = np.zeros((n + CLONE_DIM, 12))
        gbar[m6:m6 + CLONE_DIM] = g[rows]
        gbar[m6 + CLONE_DIM:] = g
        p = jbar @ state.P @ jbar.T + gbar @ config.noise.covariance() @ gbar.T
        nav = propagate_mean(state.nav, sample, dt, config.g)
    clones.append(CloneState(nav.R.copy(), nav.p.copy(), nav.t))
    return FilterState(clones, nav, symmetrize(p))


def _pose(state: FilterState, idx: int | None):
    if idx is None:
        return state.nav.R, state.nav.p
    c = state.clones[idx]
    return c.R, c.p


def _pos_offset(state: FilterState, idx: int | None) -> int:
    if idx is None:
        return state.current_offset + POS
    return CLONE_DIM * idx + 3


def measurement_function(state: FilterState, idx_i: int, idx_j: int | None) -> np.ndarray:
    """Predicted displacement ``Rz(yaw_i)^T (p_j - p_i)``; ``idx_j=None`` is the current state."""
    r_i, p_i = _pose(state, idx_i)
    _, p_j = _pose(state, idx_j)
    return so3.yaw_rotation(so3.yaw_of(r_i)).T @ (p_j - p_i)


def measurement_jacobian(state: FilterState, idx_i: int, idx_j: int | None) -> np.ndarray:
    """3 x dim Jacobian of :func:`measurement_function` with respect to the error state."""
    r_i, p_i = _pose(state, idx_i)
    _, p_j = _pose(state, idx_j)
    e = so3.decompose_euler_xyz(r_i)
    hz = so3.hz_matrix(e.yaw, e.pitch)
    rgt = so3.yaw_rotation(e.yaw).T
    h = np.zeros((3, state.dim))
    o_i = CLONE_DIM * idx_i
    h[:, o_i:o_i + 3] = rgt @ so3.skew(p_j - p_i) @ hz
    h[:, o_i + 3:o_i + 6] -= rgt
    o_j = _pos_offset(state, idx_j)
    h[:, o_j:o_j + 3] += rgt
    return h


def find_clone(state: FilterState, t: float, tol: float) -> int | None:
    for k, c in enumerate(state.clones):
        if abs(c.t - t) <= tol:
            return k
    return None


def apply_correction(state: FilterState, dx: np.ndarray) -> FilterState:
    """``X <- X (+) dx``: vector addition, rotations left-multiplied by ``Exp``."""
    clones = []
    for k, c in enumerate(state.clones):
        o = CLONE_DIM * k
        clones.append(CloneState(c.R, c.p + dx[o + 3:o + 6], c.t))
    o = state.current_offset
    nav = NavState(
        R=state.nav.R,
        v=state.nav.v + dx[o + VEL:o + VEL + 3],
        p=state.nav.p + dx[o + POS:o + POS + 3],
        b_g=state.nav.b_g + dx[o + BG:o + BG + 3],
        b_a=state.nav.b_a + dx[o + BA:o + BA + 3],
        t=state.nav.t,
    )
    nav.R = so3.exp_so3(dx[o + TH:o + TH + 3]) @ nav.R
    for k, c in enumerate(clones):
        c.R = so3.exp_so3(dx[CLONE_DIM * k:CLONE_DIM * k + 3]) @ c.R
    return FilterState(clones, nav, state.P)


def update(state: FilterState, meas: DisplacementMeasurement, config: FilterConfig,
           tol: float | None = None) -> tuple[FilterState, UpdateOutcome]:
    """Chi-square gated EKF update with a Joseph-form covariance.

    Rejected updates return ``state`` itself, untouched.
    """
    if tol is None:
        tol = 0.5 * config.noise.dt
    idx_i = find_clone(state, meas.t_i, tol)
    idx_j = find_clone(state, meas.t_j, tol)
    if idx_j is None and abs(state.nav.t - meas.t_j) > tol:
        return state, UpdateOutcome(UpdateStatus.NO_CLONE)
    if idx_i is None:
        return state, UpdateOutcome(UpdateStatus.NO_CLONE)
    try:
        h = measurement_jacobian(state, idx_i, idx_j)
    except so3.GimbalLock:
        return state, UpdateOutcome(UpdateStatus.GIMBAL_LOCK)
    r = meas.d - measurement_function(state, idx_i, idx_j)
    p = state.P
    pht = p @ h.T
    s = h @ pht + meas.cov * config.meas_cov_scale
    try:
        chol = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        return state, UpdateOutcome(UpdateStatus.SINGULAR, r)
    z = np.linalg.solve(chol, r)
    nis = float(z @ z)
    if not nis <= config.chi2_threshold:
        return state, UpdateOutcome(UpdateStatus.GATED, r, nis)
    # K = P H^T S^-1 via the Cholesky factor
    k = np.linalg.solve(chol.T, np.linalg.solve(chol, pht.T)).T
    ikh = -(k @ h)
    ikh[np.diag_indices_from(ikh)] += 1.0
    p_new = ikh @ p @ ikh.T + (k * (np.diag(meas.cov) * config.meas_cov_scale)) @ k.T
    new = apply_correction(state, k @ r)
    new.P = symmetrize(p_new)
    return new, UpdateOutcome(UpdateStatus.ACCEPTED, r, nis)


def marginalize(state: FilterState, horizon_t: float) -> FilterState:
    """Drop clones older than ``horizon_t`` and their covariance rows/columns."""
    keep = [k for k, c in enumerate(state.clones) if not c.t < horizon_t - 1e-9]
    if len(keep) == len(state.clones):
        return state
    o = state.current_offset
    idx = [CLONE_DIM * k + j for k in keep for j in range(CLONE_DIM)] + list(range(o, state.dim))
    return FilterState([state.clones[k] for k in keep], state.nav, state.P[np.ix_(idx, idx)])


def check_covariance(p: np.ndarray, tol: float = 1e-10) -> None:
    if not np.all(np.isfinite(p)):
        raise NumericalError("covariance contains non-finite values")
    if np.max(np.abs(p - p.T)) > 0.0:
        raise NumericalError("covariance is not symmetric")
    lam = np.linalg.eigvalsh(p).min()
    if lam < -tol:
        raise NumericalError(f"covariance not PSD (min eigenvalue {lam:.3g})")


EST_COLUMNS = (
    ("t",) + tuple(f"r{i}{j}" for i in range(3) for j in range(3))
    + ("vx", "vy", "vz", "px", "py", "pz", "bgx", "bgy", "bgz", "bax", "bay", "baz")
    + tuple(f"s_{blk}{ax}" for blk in ("th", "v", "p", "bg", "ba") for ax in "xyz")
)


@dataclass
class RunResult:
    """Filter output at IMU rate plus per-update diagnostics."""

    t: np.ndarray
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    b_g: np.ndarray
    b_a: np.ndarray
    std: np.ndarray  # (N, 15) marginal std of the current error state
    diagnostics: list = field(default_factory=list)
    cov_times: list = field(default_factory=list)
    cov_snapshots: list = field(default_factory=list)  # current-state 15x15 after each update epoch
    final_state: FilterState | None = None

    def est_rows(self) -> np.ndarray:
        return np.column_stack([self.t, self.R.reshape(-1, 9), self.v, self.p,
                                self.b_g, self.b_a, self.std])

    def est_csv_text(self) -> str:
        return format_rows(EST_COLUMNS, self.est_rows())


def _collect_events(imu: ImuData, meas, tol: float):
    """Map measurements onto IMU sample indices.

    Returns ``(clone_idx, updates, skipped)``: the sorted set of sample indices
    that need a clone, a dict ``sample index -> [measurement]`` keyed by the
    target time and the measurements with no matching sample.
    """
    t = imu.t

    def nearest(x):
        k = int(np.searchsorted(t, x))
        cands = [c for c in (k - 1, k) if 0 <= c < len(t)]
        if not cands:
            return None
        best = min(cands, key=lambda c: abs(t[c] - x))
        return best if abs(t[best] - x) <= tol else None

    clone_idx = set()
    updates: dict = {}
    skipped = []
    for m in meas:
        ki, kj = nearest(m.t_i), nearest(m.t_j)
        if ki is None or kj is None:
            skipped.append(m)
            continue
        clone_idx.update((ki, kj))
        updates.setdefault(kj, []).append(m)
    return sorted(clone_idx), updates, skipped


def _diag_record(m: DisplacementMeasurement, out: UpdateOutcome, clone_count: int) -> dict:
    return {
        "t_i": m.t_i,
        "t_j": m.t_j,
        "innovation": None if out.innovation is None else [float(x) for x in out.innovation],
        "nis": out.nis,
        "accepted": out.accepted,
        "status": out.status.value,
        "clone_count": clone_count,
    }


def run(imu: ImuData, meas, config: FilterConfig, init: NavState,
        init_cov: np.ndarray | None = None, check_psd: bool = False) -> RunResult:
    """Propagate through every IMU sample, cloning and updating at measurement times.

    Sample ``k`` drives the step ``t_k -> t_k+1``. ``init`` must be the state
    at ``imu.t[0]``. With ``config.combine_propagation`` the current-state
    transition of consecutive steps is accumulated and folded into the full
    covariance only when a clone or update needs it.
    """
    n = len(imu)
    if n == 0:
        raise ValueError("empty IMU stream")
    dt_nom = float(np.median(np.diff(imu.t))) if n > 1 else config.noise.dt
    tol = 0.5 * dt_nom
    meas = sorted(meas, key=lambda m: (m.t_j, m.t_i))
    clone_idx, updates, skipped = _collect_events(imu, meas, tol)
    clone_set = set(clone_idx)
    pending_ti = sorted(m.t_i for k in updates for m in updates[k])

    state = initialize(config, replace(init, t=float(imu.t[0])))
    if init_cov is not None:
        state.P = np.array(init_cov, dtype=float)
    w = config.noise.covariance()
    g = np.asarray(config.g, dtype=float)

    out_r = np.empty((n, 3, 3))
    out_v = np.empty((n, 3))
    out_p = np.empty((n, 3))
    out_bg = np.empty((n, 3))
    out_ba = np.empty((n, 3))
    out_std = np.empty((n, 15))
    diagnostics = [_diag_record(m, UpdateOutcome(UpdateStatus.NO_CLONE), 0) for m in skipped]
    cov_times, cov_snaps = [], []

    phi = np.eye(CURRENT_DIM)
    q = np.zeros((CURRENT_DIM, CURRENT_DIM))
    dirty = False

    def flush(st: FilterState) -> FilterState:
        nonlocal phi, q, dirty
        if not dirty:
            return st
        o = st.current_offset
        p = st.P.copy()
        p[o:, o:] = phi @ p[o:, o:] @ phi.T + q
        p[:o, o:] = p[:o, o:] @ phi.T
        p[o:, :o] = p[:o, o:].T
        st.P = symmetrize(p)
        phi = np.eye(CURRENT_DIM)
        q = np.zeros((CURRENT_DIM, CURRENT_DIM))
        dirty = False
        return st

    def record(k: int, st: FilterState) -> None:
        nav = st.nav
        out_r[k], out_v[k], out_p[k] = nav.R, nav.v, nav.p
        out_bg[k], out_ba[k] = nav.b_g, nav.b_a
        o = st.current_offset
        pcur = st.P[o:, o:]
        if dirty:
            var = np.einsum("ij,ij->i", phi @ pcur, phi) + np.diag(q)
        else:
            var = np.diag(pcur)
        out_std[k] = np.sqrt(np.maximum(var, 0.0))

    def events(k: int, st: FilterState) -> FilterState:
        if k in clone_set:
            st = augment(flush(st))
        if k in updates:
            st = flush(st)
            for m in updates[k]:
                st, outcome = update(st, m, config, tol)
                diagnostics.append(_diag_record(m, outcome, len(st.clones)))
                pending_ti.remove(m.t_i)
            horizon = pending_ti[0] if pending_ti else math.inf
            st = marginalize(st, horizon)
            cov_times.append(float(imu.t[k]))
            cov_snaps.append(st.current_cov().copy())
        if check_psd and (k in clone_set or k in updates):
            check_covariance(st.P)
        return st

    state = events(0, state)
    record(0, state)
    t_arr = imu.t
    combine = config.combine_propagation
    w_diag = np.diag(w)
    for k in range(n - 1):
        dt = float(t_arr[k + 1] - t_arr[k])
        nav, a, gn = _fused_step(state.nav, imu.gyro[k], imu.acc[k], dt, g)
        nav.t = float(t_arr[k + 1])
        if combine:
            phi = a @ phi
            q = a @ q @ a.T + (gn * w_diag) @ gn.T
            dirty = True
        else:
            state.P = propagate_covariance(state.P, a, gn[:, :6], gn[:, 6:], w)
        state = FilterState(state.clones, nav, state.P)
        if k + 1 in clone_set or k + 1 in updates:
            state = events(k + 1, state)
        record(k + 1, state)
    state = flush(state)
    return RunResult(imu.t.copy(), out_r, out_v, out_p, out_bg, out_ba, out_std,
                     diagnostics, cov_times, cov_snaps, state)
