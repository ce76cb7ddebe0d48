"""Run configuration loaded from a YAML file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .baseline import DEFAULT_ACCEL_GAIN, ConcatMode
from .displacement import OracleSpec
from .ekf import FilterConfig
from .imu import BiasState, ImuNoiseSpec
from .simulator import MotionProfile

SEED_MAX = 2**64 - 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class BaselineConfig:
    accel_gain: float = DEFAULT_ACCEL_GAIN
    mode: ConcatMode = ConcatMode.SCALING

    def __post_init__(self):
        object.__setattr__(self, "mode", ConcatMode(self.mode))
        if not 0.0 <= self.accel_gain < 1.0:
            raise ValueError("accel_gain must be in [0, 1)")


@dataclass(frozen=True)
class InitConfig:
    """How the filter is started relative to ground truth.

    ``sample_error`` draws the initial error from the filter prior, and
    ``bias_from_truth`` starts the bias estimate at the true initial bias
    instead of zero.
    """

    sample_error: bool = False
    bias_from_truth: bool = False


@dataclass(frozen=True)
class RunConfig:
    profile: MotionProfile = field(default_factory=MotionProfile)
    imu_noise: ImuNoiseSpec = field(default_factory=ImuNoiseSpec)
    bias_g: tuple = (0.0, 0.0, 0.0)
    bias_a: tuple = (0.0, 0.0, 0.0)
    oracle: OracleSpec = field(default_factory=OracleSpec)
    filter: FilterConfig = field(default_factory=FilterConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    init: InitConfig = field(default_factory=InitConfig)
    seed: int = 0
    output_dir: str | None = None

    def initial_bias(self) -> BiasState:
        return BiasState(np.array(self.bias_g, dtype=float), np.array(self.bias_a, dtype=float))


def _build(cls, section: str, data) -> object:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}: unknown field")
    values = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            values[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        names = [k for k in values if k in str(exc)]
        where = f"{section}.{names[0]}" if names else section
        raise ConfigError(f"{where}: {exc}") from None


def _vec3(section: str, v) -> tuple:
    try:
        out = tuple(float(x) for x in v)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}: expected three numbers") from None
    if len(out) != 3:
        raise ConfigError(f"{section}: expected three numbers, got {len(out)}")
    return out


TOP_LEVEL = {"profile", "imu_noise", "bias", "oracle", "filter", "baseline", "init", "seed", "output_dir"}


def from_dict(d: dict | None) -> RunConfig:
    d = d or {}
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be a mapping")
    for key in d:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{key}: unknown section")
    noise = _build(ImuNoiseSpec, "imu_noise", d.get("imu_noise"))
    filt = d.get("filter") or {}
    if not isinstance(filt, dict):
        raise ConfigError("filter: expected a mapping")
    filt = dict(filt)
    # the filter noise model defaults to the simulated sensor
    filt_noise = filt.pop("noise", None)
    filt_noise = noise if filt_noise is None else _build(ImuNoiseSpec, "filter.noise", filt_noise)
    filter_cfg = _build(FilterConfig, "filter", filt)
    filter_cfg = dataclasses.replace(filter_cfg, noise=filt_noise)
    bias = d.get("bias") or {}
    if not isinstance(bias, dict):
        raise ConfigError("bias: expected a mapping")
    for key in bias:
        if key not in ("g", "a"):
            raise ConfigError(f"bias.{key}: unknown field")
    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= SEED_MAX:
        raise ConfigError(f"seed: must be an integer in [0, 2^64), got {seed!r}")
    out_dir = d.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("output_dir: must be a string")
    return RunConfig(
        profile=_build(MotionProfile, "profile", d.get("profile")),
        imu_noise=noise,
        bias_g=_vec3("bias.g", bias.get("g", (0.0, 0.0, 0.0))),
        bias_a=_vec3("bias.a", bias.get("a", (0.0, 0.0, 0.0))),
        oracle=_build(OracleSpec, "oracle", d.get("oracle")),
        filter=filter_cfg,
        baseline=_build(BaselineConfig, "baseline", d.get("baseline")),
        init=_build(InitConfig, "init", d.get("init")),
        seed=seed,
        output_dir=out_dir,
    )


def load(path) -> tuple[RunConfig, str]:
    """Parse a config file; returns the config and the raw text for echoing."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return from_dict(data), text


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if hasattr(v, "value") and isinstance(getattr(v, "value"), str):
        return v.value
    if isinstance(v, np.generic):
        return v.item()
    return v


def to_dict(cfg: RunConfig) -> dict:
    d = _plain(cfg)
    d["bias"] = {"g": d.pop("bias_g"), "a": d.pop("bias_a")}
    d["filter"].pop("noise")
    d["filter"]["noise"] = _plain(cfg.filter.noise)
    return d


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)
