"""Command-line entry point: ``scekf <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, baseline, config as cfgmod, ekf, metrics, pipeline, so3
from .displacement import (
    MEAS_COLUMNS, NetInputWindow, format_net_input, gravity_aligned_buffer,
    ingest_measurements, true_displacement,
)
from .imu import IMU_COLUMNS, ImuData
from .io import SchemaError, format_jsonl, format_rows, read_csv, read_jsonl
from .simulator import GT_COLUMNS, Trajectory

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "SCEKF_OUTPUT_ROOT"
CONFIG_ECHO = "config.yaml"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Staging:
    """Collect output files in memory and publish them all at once.

    Files land in a sibling temporary directory first and are moved into the
    target directory only after every file was written, so a failure leaves
    no partial outputs behind.
    """

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def commit(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=self.out_dir, prefix=".staging."))
        try:
            for name, text in self.files.items():
                (tmp / name).write_text(text, newline="\n")
            for name in self.files:
                os.replace(tmp / name, self.out_dir / name)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)


def _load_config(args) -> tuple[cfgmod.RunConfig, str]:
    if getattr(args, "config", None):
        cfg, text = cfgmod.load(args.config)
    else:
        cfg = cfgmod.RunConfig()
        text = None
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed <= cfgmod.SEED_MAX:
            raise cfgmod.ConfigError("--seed: must be in [0, 2^64)")
        cfg = dataclasses.replace(cfg, seed=args.seed)
    filt = cfg.filter
    try:
        if getattr(args, "chi2_threshold", None) is not None:
            filt = dataclasses.replace(filt, chi2_threshold=args.chi2_threshold)
        if getattr(args, "cov_scale", None) is not None:
            filt = dataclasses.replace(filt, meas_cov_scale=args.cov_scale)
    except ValueError as exc:
        raise cfgmod.ConfigError(f"filter: {exc}") from None
    cfg = dataclasses.replace(cfg, filter=filt)
    if text is None:
        text = cfgmod.dump(cfg)
    return cfg, text


def _out_dir(args, cfg: cfgmod.RunConfig, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV, "scekf_runs")
    return Path(root) / command


def _echo(stage: Staging, cfg: cfgmod.RunConfig, text: str, args) -> None:
    """Provenance copy of the config file, followed by the effective overrides."""
    extra = []
    if getattr(args, "seed", None) is not None:
        extra.append(f"# override --seed {args.seed}")
    if getattr(args, "chi2_threshold", None) is not None:
        extra.append(f"# override --chi2-threshold {args.chi2_threshold!r}")
    if getattr(args, "cov_scale", None) is not None:
        extra.append(f"# override --cov-scale {args.cov_scale!r}")
    body = text if text.endswith("\n") else text + "\n"
    stage.add(CONFIG_ECHO, body + "".join(x + "\n" for x in extra))


def _data_path(args, name: str, attr: str) -> Path:
    explicit = getattr(args, attr, None)
    if explicit:
        return Path(explicit)
    if getattr(args, "data", None):
        return Path(args.data) / name
    raise UsageError(f"--{attr} or --data is required")


def _require(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    return path


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg, text = _load_config(args)
    seq = pipeline.simulate(cfg.profile, cfg.imu_noise, cfg.oracle, cfg.seed, cfg.initial_bias(),
                            cfg.filter.window, cfg.filter.update_freq)
    stage = Staging(_out_dir(args, cfg, "simulate"))
    t = seq.traj
    stage.add("gt.csv", format_rows(GT_COLUMNS, np.column_stack([t.t, t.R.reshape(-1, 9), t.p, t.v])))
    stage.add("imu.csv", format_rows(IMU_COLUMNS, np.column_stack([seq.imu.t, seq.imu.gyro, seq.imu.acc])))
    rows = np.array([[m.t_i, m.t_j, *m.d, *m.sigma] for m in seq.meas]).reshape(-1, 8)
    stage.add("meas.csv", format_rows(MEAS_COLUMNS, rows))
    _echo(stage, cfg, text, args)
    stage.commit()
    print(f"wrote {len(seq.imu)} IMU samples and {len(seq.meas)} measurements to {stage.out_dir}")
    return EXIT_OK


def _initial_nav(cfg: cfgmod.RunConfig, gt: Trajectory) -> ekf.NavState:
    nav = ekf.NavState(gt.R[0].copy(), gt.v[0].copy(), gt.p[0].copy(), t=float(gt.t[0]))
    if cfg.init.bias_from_truth:
        nav = dataclasses.replace(nav, b_g=np.array(cfg.bias_g), b_a=np.array(cfg.bias_a))
    if cfg.init.sample_error:
        nav = pipeline.perturb(nav, pipeline.sample_initial_error(cfg.filter, cfg.seed))
    return nav


def _load_inputs(args):
    imu = ImuData.from_csv(_require(_data_path(args, "imu.csv", "imu")))
    meas = ingest_measurements(_require(_data_path(args, "meas.csv", "meas")))
    gt = Trajectory.from_csv(_require(_data_path(args, "gt.csv", "gt")))
    if len(gt) == 0 or len(imu) == 0:
        raise SchemaError("empty IMU or ground-truth file")
    if abs(gt.t[0] - imu.t[0]) > 1e-9:
        raise SchemaError("IMU and ground truth must start at the same time")
    return imu, meas, gt


def cmd_run_filter(args) -> int:
    cfg, text = _load_config(args)
    imu, meas, gt = _load_inputs(args)
    res = ekf.run(imu, meas, cfg.filter, _initial_nav(cfg, gt), check_psd=args.check_psd)
    if not np.all(np.isfinite(res.est_rows())):
        raise ekf.NumericalError("estimate contains non-finite values")
    ekf.check_covariance(res.final_state.P)
    stage = Staging(_out_dir(args, cfg, "run-filter"))
    stage.add("est.csv", res.est_csv_text())
    stage.add("diag.jsonl", format_jsonl(res.diagnostics))
    _echo(stage, cfg, text, args)
    stage.commit()
    acc = sum(d["accepted"] for d in res.diagnostics)
    print(f"filter: {acc}/{len(res.diagnostics)} updates accepted, outputs in {stage.out_dir}")
    return EXIT_OK


def cmd_run_baseline(args) -> int:
    cfg, text = _load_config(args)
    imu, meas, gt = _load_inputs(args)
    res = baseline.run_baseline(imu, meas, gt.R[0], gt.p[0], cfg.baseline.accel_gain, cfg.baseline.mode)
    stage = Staging(_out_dir(args, cfg, "run-baseline"))
    stage.add("est.csv", res.est_csv_text())
    _echo(stage, cfg, text, args)
    stage.commit()
    print(f"baseline: {len(res.t)} positions, outputs in {stage.out_dir}")
    return EXIT_OK


@dataclasses.dataclass
class _Est:
    t: np.ndarray
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray
    std: np.ndarray


def _read_est(path) -> _Est:
    data = read_csv(_require(Path(path)), ekf.EST_COLUMNS)
    n = len(data)
    if n == 0:
        raise SchemaError(f"{path}: no estimate rows")
    t = data[:, 0]
    if np.any(np.diff(t) <= 0):
        raise SchemaError(f"{path}: timestamps must be strictly increasing")
    return _Est(t, data[:, 1:10].reshape(n, 3, 3), data[:, 13:16], data[:, 10:13], data[:, 22:37])


def _diag_nees(est: _Est, gt: Trajectory):
    """Mean NEES of attitude, velocity and position from the marginal std columns."""
    a = metrics.align(est, gt)
    std = est.std[np.searchsorted(est.t, a.t)][:, :9]
    if not np.all(std > 0):
        return None
    errs = np.array([np.concatenate([so3.log_so3(rg @ re.T), gt.v[k] - ve, pg - pe])
                     for rg, re, k, ve, pg, pe in zip(a.R_gt, a.R_est, a.gt_index,
                                                      est.v[np.searchsorted(est.t, a.t)], a.p_gt, a.p_est)])
    return float(np.mean(np.sum((errs / std) ** 2, axis=1)))


def _meas_stats(meas_path, gt: Trajectory):
    meas = ingest_measurements(_require(Path(meas_path)))
    if not meas:
        return None, None
    errs = np.array([m.d - true_displacement(gt, m.t_i, m.t_j) for m in meas])
    var = np.array([m.sigma ** 2 for m in meas])
    return metrics.nll(errs, var), metrics.mahalanobis_outlier_frac(errs, var)


def _nis_summary(diag_path, threshold: float) -> dict:
    recs = read_jsonl(_require(Path(diag_path)))
    for n, r in enumerate(recs, start=1):
        if not isinstance(r, dict) or "status" not in r or "nis" not in r:
            raise SchemaError(f"{diag_path}:{n}: missing status/nis")
    nis = np.array([r["nis"] for r in recs if r["nis"] is not None], dtype=float)
    accepted = sum(1 for r in recs if r["status"] == "accepted")
    gated = sum(1 for r in recs if r["status"] == "gated")
    edges = [0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 7.8, threshold, 20.0, 50.0, np.inf]
    counts, _ = np.histogram(nis, bins=edges)
    return {
        "updates": len(recs),
        "accepted": accepted,
        "gated": gated,
        "gate_pass_rate": accepted / (accepted + gated) if accepted + gated else None,
        "nis_mean": float(nis.mean()) if nis.size else None,
        "nis_median": float(np.median(nis)) if nis.size else None,
        "nis_histogram": {"edges": [e if np.isfinite(e) else "inf" for e in edges],
                          "counts": [int(c) for c in counts]},
    }


def _report(est: _Est, gt: Trajectory, delta: float, nll=None, frac=None) -> metrics.MetricsReport:
    try:
        rep = metrics.trajectory_report(est, gt, delta)
    except metrics.MetricError as exc:
        raise SchemaError(f"cannot evaluate: {exc}") from None
    rep.nll, rep.mahalanobis_outlier_frac = nll, frac
    rep.nees_mean = _diag_nees(est, gt)
    if rep.nees_mean is not None:
        rep.extra["nees_dims"] = 9
        rep.extra["nees_covariance"] = "diagonal"
    return rep


def cmd_evaluate(args) -> int:
    gt = Trajectory.from_csv(_require(Path(args.gt)))
    nll = frac = None
    if args.meas:
        nll, frac = _meas_stats(args.meas, gt)
    out = {}
    rep_f = _report(_read_est(args.est), gt, args.delta, nll, frac)
    out["filter"] = rep_f.to_dict()
    if args.baseline:
        rep_b = _report(_read_est(args.baseline), gt, args.delta, nll, frac)
        out["baseline"] = rep_b.to_dict()
        out["drift_reduction_pct"] = {
            k: metrics.drift_reduction_pct(getattr(rep_f, k), getattr(rep_b, k))
            for k in ("ate", "rte", "dr", "aye", "rye", "yaw_dr")
            if getattr(rep_f, k) is not None and getattr(rep_b, k) is not None
        }
    if args.diag:
        out["nis"] = _nis_summary(args.diag, args.chi2_threshold or ekf.CHI2_99_3DOF)
    out_path = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, "scekf_runs")) / "evaluate" / "report.json"
    stage = Staging(out_path.parent)
    stage.add(out_path.name, json.dumps(out, indent=2, sort_keys=True) + "\n")
    fields = ("ate", "rte", "dr", "aye", "rye", "yaw_dr", "yaw_dr_signed", "nll",
              "mahalanobis_outlier_frac", "nees_mean")
    lines = ["estimator," + ",".join(fields)]
    for name in ("filter", "baseline"):
        if name in out:
            lines.append(name + "," + ",".join("" if out[name][f] is None else "%.17g" % out[name][f]
                                               for f in fields))
    stage.add(out_path.stem + "_summary.csv", "\n".join(lines) + "\n")
    stage.commit()
    print(json.dumps({k: out["filter"][k] for k in ("ate", "rte", "dr", "aye", "yaw_dr")}, sort_keys=True))
    return EXIT_OK


def _mc_run(cfg: cfgmod.RunConfig, seed: int) -> dict:
    seq = pipeline.simulate(cfg.profile, cfg.imu_noise, cfg.oracle, seed, cfg.initial_bias(),
                            cfg.filter.window, cfg.filter.update_freq)
    err = pipeline.sample_initial_error(cfg.filter, seed) if cfg.init.sample_error else None
    res = pipeline.run_filter(seq, cfg.filter, err, init_bias_estimate=cfg.init.bias_from_truth)
    st = pipeline.consistency(seq, res)
    rep = metrics.trajectory_report(res, seq.traj)
    return {
        "seed": seed,
        "nees_mean": float(np.mean(st.nees)),
        "nees": [float(x) for x in st.nees],
        "accepted": st.accepted,
        "gated": st.gated,
        "ate": rep.ate,
        "yaw_dr": rep.yaw_dr,
    }


def montecarlo_summary(runs: list[dict], dof: int = 15, level: float = 0.95) -> dict:
    n = len(runs)
    epochs = min(len(r["nees"]) for r in runs)
    per_epoch = np.mean([r["nees"][:epochs] for r in runs], axis=0)
    lo, hi = metrics.chi2_envelope(dof, n, level)
    mean_nees = float(np.mean(per_epoch))
    inside = float(np.mean((per_epoch >= lo) & (per_epoch <= hi)))
    acc = sum(r["accepted"] for r in runs)
    gated = sum(r["gated"] for r in runs)
    return {
        "runs": n,
        "nees_mean": mean_nees,
        "nees_envelope": [lo, hi],
        "nees_epoch_fraction_inside": inside,
        "gate_pass_rate": acc / (acc + gated) if acc + gated else None,
        "verdict": "PASS" if lo <= mean_nees <= hi else "FAIL",
    }


def cmd_montecarlo(args) -> int:
    cfg, text = _load_config(args)
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    seeds = [cfg.seed + i for i in range(args.n)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            runs = list(pool.map(_mc_run, [cfg] * len(seeds), seeds))
    else:
        runs = [_mc_run(cfg, s) for s in seeds]
    summary = montecarlo_summary(runs)
    stage = Staging(_out_dir(args, cfg, "montecarlo"))
    stage.add("montecarlo.json", json.dumps({"summary": summary, "runs": runs}, indent=2, sort_keys=True) + "\n")
    cols = ("seed", "nees_mean", "accepted", "gated", "ate", "yaw_dr")
    stage.add("runs.csv", "\n".join([",".join(cols)] + [",".join("%.17g" % r[c] for c in cols) for r in runs]) + "\n")
    _echo(stage, cfg, text, args)
    stage.commit()
    lo, hi = summary["nees_envelope"]
    print(f"NEES mean {summary['nees_mean']:.3f} envelope [{lo:.3f}, {hi:.3f}] {summary['verdict']}")
    return EXIT_OK


def cmd_export_net_input(args) -> int:
    cfg, text = _load_config(args)
    imu = ImuData.from_csv(_require(_data_path(args, "imu.csv", "imu")))
    meas = ingest_measurements(_require(_data_path(args, "meas.csv", "meas")))
    att_path = _require(Path(args.attitude) if args.attitude else _data_path(args, "gt.csv", "gt"))
    cols = read_csv(att_path, required=("t",) + tuple(f"r{i}{j}" for i in range(3) for j in range(3)))
    att_t = cols["t"]
    att_r = np.stack([cols[f"r{i}{j}"] for i in range(3) for j in range(3)], axis=1).reshape(-1, 3, 3)
    rate = 1.0 / float(np.median(np.diff(imu.t)))
    tol = 0.5 / rate
    windows = []
    for m in meas:
        k = int(np.argmin(np.abs(att_t - m.t_i)))
        if abs(att_t[k] - m.t_i) > tol:
            raise SchemaError(f"{att_path}: no attitude near t={m.t_i}")
        sel = (imu.t >= m.t_i - tol) & (imu.t < m.t_j - tol)
        window = ImuData(imu.t[sel], imu.gyro[sel], imu.acc[sel])
        windows.append(NetInputWindow(m.t_i, rate, gravity_aligned_buffer(window, att_r[k])))
    out = Path(args.out) if args.out else _out_dir(args, cfg, "export-net-input") / "net_input.txt"
    stage = Staging(out.parent)
    stage.add(out.name, format_net_input(windows))
    stage.commit()
    print(f"wrote {len(windows)} windows to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: config output_dir or $%s/<command>)" % OUTPUT_ROOT_ENV)


def _filter_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chi2-threshold", type=float, help="override the NIS gate")
    p.add_argument("--cov-scale", type=float, help="override the measurement covariance scale")


def _inputs(p: argparse.ArgumentParser, gt: bool = True) -> None:
    p.add_argument("--data", help="directory holding imu.csv, meas.csv and gt.csv")
    p.add_argument("--imu")
    p.add_argument("--meas")
    if gt:
        p.add_argument("--gt", help="ground truth; its first row initializes the estimator")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scekf", description="IMU + displacement fusion toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write gt.csv, imu.csv and meas.csv")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run-filter", help="run the EKF, write est.csv and diag.jsonl")
    _common(p)
    _filter_flags(p)
    _inputs(p)
    p.add_argument("--check-psd", action="store_true", help="verify the covariance at every event")
    p.set_defaults(func=cmd_run_filter)

    p = sub.add_parser("run-baseline", help="run the displacement-concatenation baseline")
    _common(p)
    _inputs(p)
    p.set_defaults(func=cmd_run_baseline)

    p = sub.add_parser("evaluate", help="compute trajectory metrics, write report.json")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--baseline", help="second estimate to compare against")
    p.add_argument("--diag", help="filter diag.jsonl for NIS statistics")
    p.add_argument("--meas", help="measurement CSV for likelihood statistics")
    p.add_argument("--delta", type=float, default=1.0, help="relative-metric window, seconds")
    p.add_argument("--chi2-threshold", type=float)
    p.add_argument("--out", help="report path (default report.json under $%s/evaluate)" % OUTPUT_ROOT_ENV)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("montecarlo", help="seed-derived repeated runs with a NEES verdict")
    _common(p)
    _filter_flags(p)
    p.add_argument("--n", type=int, default=50, help="number of runs (>= 2)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("export-net-input", help="gravity-aligned IMU windows for an external network")
    _common(p)
    _inputs(p)
    p.add_argument("--attitude", help="CSV with t,r00..r22 columns for anchor attitudes (default: gt)")
    p.set_defaults(func=cmd_export_net_input)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"scekf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, FileNotFoundError, baseline.MissingYaw) as exc:
        print(f"scekf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ekf.NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"scekf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"scekf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
