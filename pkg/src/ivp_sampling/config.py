"""Experiment configuration: TOML file with dotted sections, merged over defaults."""

from __future__ import annotations

import copy
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import TemporalGrid
from .errors import ConfigError, DomainError

STRATEGIES = ("ivp", "vanilla", "as_large_u", "as_large_v", "as_bad_v")

DEFAULTS = {
    "benchmark": "quadrotor",
    "strategy": "ivp",
    "seed": 0,
    "threads": 0,                      # 0 = logical cores
    "out": "runs/out",
    "lqr": {
        "T": 10, "N": 50, "epsilon": 0.1, "dt": 0.01,
        "perf_repeats": 2000, "eval_points": 1000,
        "moment_times": [2.5, 5.0, 10.0], "moment_repeats": 200,
        "sweep_T": [4, 8, 16, 32, 64], "sweep_N": 100, "sweep_repeats": 10,
        "sweep_eval_points": 1000, "paths": 4,
    },
    "quadrotor": {
        "horizon": 16.0,
        "box": "desk", "position_scale": 0.2, "angle_scale": 0.5,
        "mass": 2.0, "inertia": [1.2416, 1.2416, 2.4832], "gravity": 9.81,
        "arm": 0.2, "drag": 0.05,
        "Q_u": [1.0, 1.0, 1.0, 1.0], "Q_pf": 5.0, "Q_vf": 10.0, "Q_etaf": 25.0, "Q_wf": 50.0,
    },
    "sampler": {
        "grid": [0.0, 10.0, 14.0, 16.0],
        "N": 20, "n_test": 10, "delta": 0.2, "rollout_substeps": 20,
        "initial_batch": 20, "increments": [16, 12, 12], "candidates_per_pick": 2,
    },
    "solver": {
        "dt": 0.05, "segments": 8, "max_iter": 60, "tol_bc": 1e-6, "tol_stationarity": 1e-8,
        "tol_defect": 1e-8, "fd_step": 1e-6, "march_steps": 10,
        "warm_start_from_previous": True, "cold_start": "interpolate",
    },
    "nn": {
        "hidden": [128, 128], "activation": "tanh", "learning_rate": 1e-3,
        "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8,
        "batch_size": 256, "epochs": 1000, "seed": 0, "finetune": False, "holdout": 0.0,
        "standardize_outputs": True,
    },
    "metrics": {
        "mismatch": True, "cdf": True,
        "disturbance_sigmas": [0.0, 0.01, 0.05, 0.1], "disturbance_trials": 2,
        "open_loop_disturbance": True,
    },
}


def _merge(base: dict, over: dict, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key!r} must be a table")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the TOML file, then flat ``{"section.key": value}`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                cfg = _merge(cfg, tomllib.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    validate(cfg)
    return cfg


def validate(cfg: dict):
    if cfg["benchmark"] not in ("lqr", "quadrotor"):
        raise ConfigError(f"benchmark must be lqr or quadrotor, got {cfg['benchmark']!r}")
    if cfg["strategy"] not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {cfg['strategy']!r}")
    seed = cfg["seed"]
    if not isinstance(seed, int) or seed < 0 or seed >= 2 ** 64:
        raise ConfigError("seed must be an integer in [0, 2^64)")
    s = cfg["sampler"]
    try:
        TemporalGrid(tuple(float(k) for k in s["grid"])).check_horizon(cfg["quadrotor"]["horizon"])
    except DomainError as exc:
        raise ConfigError(f"sampler.grid: {exc}") from None
    for key in ("N", "n_test", "initial_batch", "candidates_per_pick", "rollout_substeps"):
        if int(s[key]) < 1:
            raise ConfigError(f"sampler.{key} must be positive")
    if any(int(k) < 1 for k in s["increments"]):
        raise ConfigError("sampler.increments must be positive")
    if s["delta"] <= 0:
        raise ConfigError("sampler.delta must be positive")
    ratio = s["delta"] / cfg["solver"]["dt"]
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("sampler.delta must be a multiple of solver.dt")
    q = cfg["lqr"]
    if int(q["T"]) < 1 or int(q["N"]) < 1 or q["epsilon"] < 0:
        raise ConfigError("lqr.T and lqr.N must be positive and lqr.epsilon >= 0")
    if cfg["quadrotor"]["box"] not in ("desk", "paper"):
        raise ConfigError("quadrotor.box must be desk or paper")
    if cfg["solver"]["cold_start"] not in ("interpolate", "rollout"):
        raise ConfigError("solver.cold_start must be interpolate or rollout")
    if int(cfg["threads"]) < 0:
        raise ConfigError("threads must be >= 0")


def parse_grid(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}") from None


def echo(cfg: dict) -> str:
    """Effective configuration as dotted ``key = value`` lines, sorted."""
    lines = []

    def walk(node, prefix):
        for k in sorted(node):
            v = node[k]
            if isinstance(v, dict):
                walk(v, f"{prefix}{k}.")
            else:
                lines.append(f"{prefix}{k} = {json.dumps(v)}")
    walk(cfg, "")
    return "\n".join(lines) + "\n"
