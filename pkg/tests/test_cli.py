import json
import math

import numpy as np
import pytest

from scekf import cli
from scekf.displacement import read_net_input
from scekf.simulator import Trajectory

BASE = "profile: {kind: circle_walk, duration: 6.0, sway_roll: 0.1, sway_freq: 0.5}\nseed: 9\n"


def _cfg(tmp_path, text=BASE, name="run.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture
def sim(tmp_path):
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--config", _cfg(tmp_path), "--out", str(out)]) == 0
    return out


def _rows(path):
    return path.read_text().count("\n") - 1


def test_simulate_row_counts(tmp_path):
    still = tmp_path / "still"
    cfg = _cfg(tmp_path, "profile: {kind: standstill, duration: 10.0}\n", "still.yaml")
    assert cli.main(["simulate", "--config", cfg, "--out", str(still)]) == 0
    assert _rows(still / "imu.csv") == 2000 and _rows(still / "gt.csv") == 2000
    walk = tmp_path / "walk"
    cfg = _cfg(tmp_path, "profile: {kind: circle_walk, duration: 60.0}\n", "walk.yaml")
    assert cli.main(["simulate", "--config", cfg, "--out", str(walk)]) == 0
    assert _rows(walk / "meas.csv") == 1180
    assert (walk / "config.yaml").read_text() == "profile: {kind: circle_walk, duration: 60.0}\n"


def test_simulate_without_config_echoes_defaults(tmp_path):
    out = tmp_path / "d"
    assert cli.main(["simulate", "--seed", "4", "--out", str(out)]) == 0
    text = (out / "config.yaml").read_text()
    assert "seed: 4" in text and text.endswith("# override --seed 4\n")


def test_run_filter_overrides_are_echoed(tmp_path, sim):
    out = tmp_path / "f"
    argv = ["run-filter", "--config", _cfg(tmp_path), "--data", str(sim), "--out", str(out),
            "--chi2-threshold", "9.21", "--cov-scale", "4"]
    assert cli.main(argv) == 0
    echo = (out / "config.yaml").read_text()
    assert echo.startswith(BASE)
    assert "# override --chi2-threshold 9.21" in echo and "# override --cov-scale 4.0" in echo
    diag = [json.loads(x) for x in (out / "diag.jsonl").read_text().splitlines()]
    assert len(diag) == _rows(sim / "meas.csv")
    assert {d["status"] for d in diag} <= {"accepted", "gated", "no_clone"}


def test_missing_input_leaves_no_outputs(tmp_path, sim):
    (sim / "meas.csv").unlink()
    out = tmp_path / "f"
    assert cli.main(["run-filter", "--config", _cfg(tmp_path), "--data", str(sim), "--out", str(out)]) == cli.EXIT_DATA
    assert not out.exists() or not any(out.iterdir())


def test_noiseless_filter_tracks_truth(tmp_path):
    cfg = _cfg(tmp_path, "profile: {kind: figure_eight, duration: 6.0}\n"
                         "imu_noise: {sigma_g: 0, sigma_a: 0, sigma_bg: 0, sigma_ba: 0}\n"
                         "filter: {noise: {sigma_g: 1.0e-4, sigma_a: 1.0e-3, sigma_bg: 1.0e-6, sigma_ba: 1.0e-5}}\n"
                         "oracle: {sigma: [1.0e-4, 1.0e-4, 1.0e-4]}\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["run-filter", "--config", cfg, "--data", str(tmp_path / "s"), "--out", str(tmp_path / "f")]) == 0
    est = cli._read_est(tmp_path / "f" / "est.csv")
    gt = Trajectory.from_csv(tmp_path / "s" / "gt.csv")
    assert np.linalg.norm(est.p[-1] - gt.p[gt.index_at(float(est.t[-1]))]) < 1e-3


def test_evaluate_report(tmp_path, sim):
    cfg = _cfg(tmp_path)
    assert cli.main(["run-filter", "--config", cfg, "--data", str(sim), "--out", str(tmp_path / "f")]) == 0
    assert cli.main(["run-baseline", "--config", cfg, "--data", str(sim), "--out", str(tmp_path / "b")]) == 0
    report = tmp_path / "e" / "report.json"
    argv = ["evaluate", "--est", str(tmp_path / "f" / "est.csv"), "--gt", str(sim / "gt.csv"),
            "--baseline", str(tmp_path / "b" / "est.csv"), "--meas", str(sim / "meas.csv"),
            "--diag", str(tmp_path / "f" / "diag.jsonl"), "--out", str(report)]
    assert cli.main(argv) == 0
    out = json.loads(report.read_text())
    assert set(out) == {"filter", "baseline", "drift_reduction_pct", "nis"}
    for key in ("ate", "rte", "dr", "aye", "rye", "yaw_dr", "yaw_dr_signed", "nll", "nees_mean"):
        assert out["filter"][key] is not None and math.isfinite(out["filter"][key])
    assert out["baseline"]["nees_mean"] is None
    red = out["drift_reduction_pct"]["ate"]
    assert red == pytest.approx(100 * (1 - out["filter"]["ate"] / out["baseline"]["ate"]))
    nis = out["nis"]
    assert nis["updates"] == _rows(sim / "meas.csv")
    assert sum(nis["nis_histogram"]["counts"]) == nis["accepted"] + nis["gated"]
    summary = (tmp_path / "e" / "report_summary.csv").read_text().splitlines()
    assert [s.split(",")[0] for s in summary] == ["estimator", "filter", "baseline"]


def test_evaluate_rejects_disjoint_times(tmp_path, sim):
    est = tmp_path / "est.csv"
    assert cli.main(["run-filter", "--config", _cfg(tmp_path), "--data", str(sim), "--out", str(tmp_path / "f")]) == 0
    rows = (tmp_path / "f" / "est.csv").read_text().splitlines()
    shifted = [rows[0]] + [",".join([str(float(r.split(",")[0]) + 1000.0)] + r.split(",")[1:]) for r in rows[1:]]
    est.write_text("\n".join(shifted) + "\n")
    code = cli.main(["evaluate", "--est", str(est), "--gt", str(sim / "gt.csv"), "--out", str(tmp_path / "r.json")])
    assert code == cli.EXIT_DATA and not (tmp_path / "r.json").exists()


MC = ("profile: {kind: circle_walk, duration: 8.0}\n"
      "filter: {meas_cov_scale: 1.0, sigma_theta_deg: [0.5, 0.5, 0.1]}\n"
      "init: {sample_error: true, bias_from_truth: true}\nseed: 300\n")


def test_montecarlo_consistent_oracle_passes(tmp_path, capsys):
    out = tmp_path / "mc"
    assert cli.main(["montecarlo", "--config", _cfg(tmp_path, MC), "--n", "6", "--out", str(out)]) == 0
    summary = json.loads((out / "montecarlo.json").read_text())["summary"]
    assert summary["verdict"] == "PASS" and summary["runs"] == 6
    assert _rows(out / "runs.csv") == 6
    assert "PASS" in capsys.readouterr().out


def test_montecarlo_overconfident_oracle_fails(tmp_path):
    out = tmp_path / "mc"
    text = MC + "oracle: {cov_scale: 0.25}\n"
    assert cli.main(["montecarlo", "--config", _cfg(tmp_path, text), "--n", "6", "--out", str(out)]) == 0
    summary = json.loads((out / "montecarlo.json").read_text())["summary"]
    assert summary["verdict"] == "FAIL" and summary["nees_mean"] > summary["nees_envelope"][1]


def test_montecarlo_requires_two_runs(tmp_path):
    assert cli.main(["montecarlo", "--n", "1", "--out", str(tmp_path / "mc")]) == cli.EXIT_USAGE


def test_exit_codes(tmp_path, sim):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.yaml")]) == cli.EXIT_USAGE
    bad = _cfg(tmp_path, "filter: {meas_cov_scale: 0.1}\n", "bad.yaml")
    assert cli.main(["simulate", "--config", bad, "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE
    assert not (tmp_path / "x").exists()
    assert cli.main(["simulate", "--seed", "-3", "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE
    assert cli.main(["run-filter", "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == cli.EXIT_USAGE
    (sim / "imu.csv").write_text("t,wx,wy,wz,ax,ay,az\n0,nan,0,0,0,0,9.81\n")
    assert cli.main(["run-filter", "--data", str(sim), "--out", str(tmp_path / "y")]) == cli.EXIT_DATA


def test_export_net_input(tmp_path, sim):
    out = tmp_path / "n" / "net_input.txt"
    assert cli.main(["export-net-input", "--config", _cfg(tmp_path), "--data", str(sim), "--out", str(out)]) == 0
    wins = read_net_input(out)
    assert len(wins) == _rows(sim / "meas.csv")
    assert all(w.data.shape == (200, 6) and w.rate == pytest.approx(200.0) for w in wins)
    # gravity sits on the z axis of every gravity-aligned buffer
    assert abs(np.mean([w.data[:, 5].mean() for w in wins]) - 9.81) < 0.05
