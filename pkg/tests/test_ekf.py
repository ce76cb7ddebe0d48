import dataclasses
import math

import numpy as np
import pytest

import oracles
from scekf import ekf, pipeline, so3
from scekf.displacement import DisplacementMeasurement, OracleSpec
from scekf.imu import GRAVITY, ImuData, ImuNoiseSpec, ImuSample
from scekf.simulator import MotionProfile, derive_imu, generate

def level_nav(**kw):
    return ekf.NavState(np.eye(3), np.zeros(3), np.zeros(3), **kw)


def test_initial_covariance_defaults():
    p = ekf.initialize(ekf.FilterConfig(), level_nav()).P
    assert p.shape == (15, 15)
    assert np.allclose(np.diag(p)[ekf.VEL:ekf.VEL + 3], 0.01)
    assert np.allclose(np.diag(p)[ekf.BG:ekf.BG + 3], 1e-8)
    assert np.allclose(np.diag(p)[ekf.BA:ekf.BA + 3], 0.04)
    assert np.allclose(np.diag(p)[0:3], np.radians([10.0, 10.0, 0.1]) ** 2)


def test_level_standstill_propagation_is_stationary():
    nav = level_nav()
    s = ImuSample(0.0, np.zeros(3), np.array([0.0, 0.0, 9.81]))
    out = ekf.propagate_mean(nav, s, 0.005)
    assert np.array_equal(out.v, np.zeros(3)) and np.array_equal(out.p, np.zeros(3))
    assert np.array_equal(out.R, np.eye(3))


def test_free_fall_single_step():
    nav = level_nav()
    dt = 0.01
    out = ekf.propagate_mean(nav, ImuSample(0.0, np.zeros(3), np.zeros(3)), dt)
    assert abs(out.p[2] + 0.5 * 9.81 * dt * dt) < 1e-9
    assert out.v[2] == pytest.approx(-9.81 * dt)


def test_propagation_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        nav, s = oracles.random_nav(rng), oracles.random_sample(rng)
        dt = rng.uniform(0.001, 0.1)
        a, b, c = ekf.propagation_jacobians(nav, s, dt)
        a_fd, b_fd = oracles.fd_propagation_jacobians(nav, s, dt)
        assert np.abs(a - a_fd).max() < 1e-5
        assert np.abs(b - b_fd).max() < 1e-5
        assert np.array_equal(c[ekf.BG:ekf.BG + 3, 0:3], np.eye(3))
        assert np.array_equal(c[ekf.BA:ekf.BA + 3, 3:6], np.eye(3))
        assert np.count_nonzero(c) == 6


def test_velocity_attitude_block_is_skew_of_world_accel():
    rng = np.random.default_rng(1)
    nav, s = oracles.random_nav(rng), oracles.random_sample(rng)
    dt = 0.02
    a, _, _ = ekf.propagation_jacobians(nav, s, dt)
    f = nav.R @ (s.acc - nav.b_a)
    expanded = np.array([[0, f[2], -f[1]], [-f[2], 0, f[0]], [f[1], -f[0], 0]]) * dt
    assert np.allclose(a[ekf.VEL:ekf.VEL + 3, 0:3], expanded, atol=1e-15)


def test_fused_step_matches_reference_path():
    rng = np.random.default_rng(2)
    nav, s = oracles.random_nav(rng), oracles.random_sample(rng)
    nxt, a, gn = ekf._fused_step(nav, s.gyro, s.acc, 0.005, GRAVITY)
    ref = ekf.propagate_mean(nav, s, 0.005)
    a_ref, b_ref, c_ref = ekf.propagation_jacobians(nav, s, 0.005)
    assert np.allclose(nxt.R, ref.R, atol=1e-15) and np.allclose(nxt.p, ref.p, atol=1e-15)
    assert np.array_equal(a, a_ref)
    assert np.array_equal(gn, np.hstack([b_ref, c_ref]))


def test_covariance_unchanged_without_noise_or_dynamics():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(27, 27))
    p = m @ m.T
    out = ekf.propagate_covariance(p, np.eye(15), np.zeros((15, 6)), np.zeros((15, 6)), np.zeros((12, 12)))
    assert np.allclose(out, p, atol=1e-12)


def test_standstill_bias_variance_grows_by_walk():
    cfg = ekf.FilterConfig(noise=ImuNoiseSpec(sigma_g=1e-3, sigma_a=1e-2, sigma_bg=2e-5, sigma_ba=3e-4))
    st = ekf.initialize(cfg, level_nav())
    s = ImuSample(0.0, np.zeros(3), np.array([0.0, 0.0, 9.81]))
    p0 = np.diag(st.P).copy()
    k = 50
    for _ in range(k):
        st = ekf.propagate(st, s, 0.005, cfg)
    grow = np.diag(st.P) - p0
    assert np.allclose(grow[ekf.BG:ekf.BG + 3], k * 2e-5 ** 2, rtol=1e-9, atol=0)
    assert np.allclose(grow[ekf.BA:ekf.BA + 3], k * 3e-4 ** 2, rtol=1e-9, atol=0)


def test_propagate_covariance_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ekf.propagate_covariance(np.eye(16), np.eye(15), np.zeros((15, 6)), np.zeros((15, 6)), np.eye(12))


def test_augment_dimensions_and_copy():
    st = ekf.initialize(ekf.FilterConfig(), level_nav())
    st.P = st.P + 0.001
    for m in range(3):
        nxt = ekf.augment(st)
        assert len(nxt.clones) == m + 1 and nxt.P.shape == (6 * m + 21, 6 * m + 21)
        o = 6 * m
        cur = nxt.current_offset
        assert np.allclose(nxt.P[o:o + 3, o:o + 3], nxt.P[cur:cur + 3, cur:cur + 3])
        assert np.allclose(nxt.P[o + 3:o + 6, cur + ekf.POS:cur + ekf.POS + 3],
                           nxt.P[cur + ekf.POS:cur + ekf.POS + 3, cur + ekf.POS:cur + ekf.POS + 3])
        st = nxt


def test_augment_with_propagation_matches_monte_carlo():
    rng = np.random.default_rng(4)
    cfg = ekf.FilterConfig(noise=ImuNoiseSpec(sigma_g=2e-3, sigma_a=2e-2, sigma_bg=1e-4, sigma_ba=1e-3))
    nav = ekf.NavState(oracles.random_rotation(rng), rng.normal(size=3), rng.normal(size=3),
                       np.zeros(3), np.zeros(3))
    st = ekf.augment(ekf.initialize(cfg, nav))
    sig = np.concatenate([[1e-3] * 6, [1e-3] * 3, [1e-2] * 3, [1e-3] * 3, [1e-4] * 3, [1e-3] * 3])
    m = rng.normal(size=(21, 21)) * 0.2
    st.P = np.diag(sig) @ (m @ m.T + np.eye(21)) @ np.diag(sig)
    s = oracles.random_sample(rng)
    dt = 0.01
    out = ekf.augment(st, s, dt, cfg)
    n = 10_000
    chol = np.linalg.cholesky(st.P)
    wstd = np.sqrt(np.diag(cfg.noise.covariance()))
    samples = np.empty((n, out.dim))
    ref = out.nav
    for k in range(n):
        dx = chol @ rng.standard_normal(21)
        noise = wstd * rng.standard_normal(12)
        true = oracles.retract(st.nav, dx[6:])
        ts = ImuSample(0.0, s.gyro - noise[0:3], s.acc - noise[3:6])
        tn = ekf.propagate_mean(true, ts, dt)
        tn.b_g = tn.b_g + noise[6:9]
        tn.b_a = tn.b_a + noise[9:12]
        e = oracles.nav_error(tn, ref)
        samples[k] = np.concatenate([dx[:6], e[0:3], e[6:9], e])
    emp = np.cov(samples.T)
    assert np.linalg.norm(emp - out.P) / np.linalg.norm(out.P) < 0.03


def test_measurement_jacobian_zero_baseline():
    rng = np.random.default_rng(5)
    st = oracles.random_filter_state(rng, clones=1)
    st.nav.p = st.clones[0].p.copy()
    h = ekf.measurement_jacobian(st, 0, None)
    assert np.array_equal(h[:, 0:3], np.zeros((3, 3)))


def test_measurement_jacobian_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(20):
        st = oracles.random_filter_state(rng, clones=3)
        for i, j in [(0, None), (0, 2), (1, None)]:
            h = ekf.measurement_jacobian(st, i, j)
            assert np.abs(h - oracles.fd_measurement_jacobian(st, i, j)).max() < 1e-5
            o = st.current_offset
            assert not h[:, o + ekf.VEL:o + ekf.VEL + 3].any() and not h[:, o + ekf.BG:].any()


def _one_clone_state(p_diag, delta=np.zeros(3)):
    cl = ekf.CloneState(np.eye(3), np.zeros(3), 0.0)
    nav = ekf.NavState(np.eye(3), np.zeros(3), np.asarray(delta, dtype=float), t=1.0)
    return ekf.FilterState([cl], nav, np.diag(p_diag))


def test_zero_innovation_leaves_mean_and_shrinks_trace():
    cfg = ekf.FilterConfig(meas_cov_scale=1.0)
    st = _one_clone_state(np.full(21, 0.01), delta=[1.0, 0.0, 0.0])
    m = DisplacementMeasurement(0.0, 1.0, [1.0, 0.0, 0.0], [0.05, 0.05, 0.05])
    out, res = ekf.update(st, m, cfg)
    assert res.accepted and np.allclose(res.innovation, 0.0)
    assert np.allclose(out.nav.p, st.nav.p) and np.allclose(out.nav.R, st.nav.R)
    assert np.trace(out.P) < np.trace(st.P)


def test_gate_rejects_and_leaves_state_untouched():
    cfg = ekf.FilterConfig(meas_cov_scale=1.0)
    # negligible prior so S = R; innovation along x with normalized squared distance 12
    st = _one_clone_state(np.full(21, 1e-30))
    sigma = 0.1
    m = DisplacementMeasurement(0.0, 1.0, [math.sqrt(12.0) * sigma, 0.0, 0.0], [sigma] * 3)
    out, res = ekf.update(st, m, cfg)
    assert res.status is ekf.UpdateStatus.GATED and res.nis == pytest.approx(12.0)
    assert out is st


def test_scalar_kalman_analog():
    # clone and current share the same pose, so the attitude columns vanish and
    # each axis is an independent scalar problem d = p_j - p_i
    pc, pj, r = 0.04, 0.09, 0.0025
    diag = np.full(21, 1.0)
    diag[3:6] = pc
    diag[6 + ekf.POS:6 + ekf.POS + 3] = pj
    st = _one_clone_state(diag)
    z = np.array([0.1, -0.05, 0.02])
    m = DisplacementMeasurement(0.0, 1.0, z, [math.sqrt(r)] * 3)
    out, res = ekf.update(st, m, ekf.FilterConfig(meas_cov_scale=1.0))
    s = pc + pj + r
    assert res.accepted
    assert np.allclose(out.nav.p, pj / s * z, atol=1e-14)
    assert np.allclose(out.clones[0].p, -pc / s * z, atol=1e-14)
    o = 6 + ekf.POS
    assert np.allclose(np.diag(out.P)[o:o + 3], pj - pj * pj / s, atol=1e-14)
    assert np.allclose(np.diag(out.P)[3:6], pc - pc * pc / s, atol=1e-14)
    assert np.allclose(out.P[3:6, o:o + 3], np.eye(3) * (pc * pj / s), atol=1e-14)
    assert res.nis == pytest.approx(float(z @ z) / s)


def test_update_status_no_clone_and_gimbal():
    cfg = ekf.FilterConfig()
    st = _one_clone_state(np.full(21, 0.01))
    out, res = ekf.update(st, DisplacementMeasurement(0.5, 1.0, np.zeros(3), np.ones(3)), cfg)
    assert res.status is ekf.UpdateStatus.NO_CLONE and out is st
    out, res = ekf.update(st, DisplacementMeasurement(0.0, 3.0, np.zeros(3), np.ones(3)), cfg)
    assert res.status is ekf.UpdateStatus.NO_CLONE
    st.clones[0].R = so3.compose_euler_xyz(0.0, math.pi / 2, 0.0)
    out, res = ekf.update(st, DisplacementMeasurement(0.0, 1.0, np.zeros(3), np.ones(3)), cfg)
    assert res.status is ekf.UpdateStatus.GIMBAL_LOCK and out is st


def test_apply_correction_left_perturbation():
    rng = np.random.default_rng(7)
    st = oracles.random_filter_state(rng, clones=2)
    dx = rng.normal(size=st.dim) * 0.01
    out = ekf.apply_correction(st, dx)
    o = st.current_offset
    assert np.allclose(out.nav.R, so3.exp_so3(dx[o:o + 3]) @ st.nav.R)
    assert np.allclose(out.clones[1].R, so3.exp_so3(dx[6:9]) @ st.clones[1].R)
    assert np.allclose(out.nav.b_a, st.nav.b_a + dx[o + ekf.BA:o + ekf.BA + 3])


def test_marginalize():
    rng = np.random.default_rng(8)
    st = oracles.random_filter_state(rng, clones=3)
    assert ekf.marginalize(st, -1.0) is st
    out = ekf.marginalize(st, 1.5)
    assert [c.t for c in out.clones] == [2.0]
    assert np.array_equal(out.P, st.P[12:, 12:])


@pytest.fixture(scope="module")
def short_run():
    cfg = ekf.FilterConfig()
    seq = pipeline.simulate(MotionProfile(kind="circle_walk", duration=10.0), cfg.noise, OracleSpec(), 3)
    return seq, cfg, pipeline.run_filter(seq, cfg)


def test_clone_count_bounded(short_run):
    _, _, res = short_run
    assert max(d["clone_count"] for d in res.diagnostics) <= 21


def test_combined_propagation_equals_stepwise(short_run):
    seq, cfg, res = short_run
    ref = pipeline.run_filter(seq, dataclasses.replace(cfg, combine_propagation=False))
    assert np.abs(res.p - ref.p).max() < 1e-10
    assert np.abs(res.std - ref.std).max() < 1e-10


def test_run_with_check_psd_and_outputs(short_run):
    seq, cfg, _ = short_run
    res = pipeline.run_filter(seq, cfg, check_psd=True)
    assert res.est_rows().shape == (len(seq.imu), len(ekf.EST_COLUMNS))
    assert res.est_csv_text().splitlines()[0] == ",".join(ekf.EST_COLUMNS)
    assert len(res.diagnostics) == len(seq.meas)
    ekf.check_covariance(res.final_state.P)


def test_noiseless_dead_reckoning_matches_truth():
    traj = generate(MotionProfile(kind="figure_eight", duration=20.0, sway_roll=0.1, sway_freq=0.5))
    imu = derive_imu(traj)
    res = ekf.run(imu, [], ekf.FilterConfig(), ekf.NavState(traj.R[0], traj.v[0], traj.p[0]))
    assert np.abs(res.p - traj.p).max() < 1e-3


def test_check_covariance_detects_problems():
    with pytest.raises(ekf.NumericalError):
        ekf.check_covariance(np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ekf.NumericalError):
        ekf.check_covariance(np.diag([1.0, -1.0]))
    with pytest.raises(ekf.NumericalError):
        ekf.check_covariance(np.diag([1.0, np.nan]))


def test_run_rejects_empty_stream():
    with pytest.raises(ValueError):
        ekf.run(ImuData(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))), [], ekf.FilterConfig(), level_nav())


def test_unmatched_measurement_is_reported():
    traj = generate(MotionProfile(kind="standstill", duration=1.0))
    imu = derive_imu(traj)
    far = DisplacementMeasurement(5.0, 6.0, np.zeros(3), np.ones(3))
    res = ekf.run(imu, [far], ekf.FilterConfig(), ekf.NavState(traj.R[0], traj.v[0], traj.p[0]))
    assert [d["status"] for d in res.diagnostics] == ["no_clone"]


def test_config_validation():
    with pytest.raises(ValueError):
        ekf.FilterConfig(meas_cov_scale=0.5)
    with pytest.raises(ValueError):
        ekf.FilterConfig(chi2_threshold=0.0)
    with pytest.raises(ValueError):
        ekf.FilterConfig(sigma_v=-1.0)
