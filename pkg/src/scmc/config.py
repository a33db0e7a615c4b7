"""Experiment configuration: defaults, validation and canonical JSON."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .abc import RICKER_EPS
from .errors import ConfigError

EXPERIMENTS = ("monotone", "manifold", "sir", "ricker-abc")

# per-experiment defaults: run-level settings first, then model constants
RUN_DEFAULTS = {
    "monotone": {"particles": 2000, "stages": 50, "sweeps": 1},
    "manifold": {"particles": 100000, "stages": 1102, "sweeps": 1},
    "sir": {"particles": 2000, "stages": 50, "sweeps": 5},
    "ricker-abc": {"particles": 2000, "stages": 7, "sweeps": 5},
}

MODEL_DEFAULTS = {
    "monotone": {
        "toy": "f1",
        "order": 9,
        "sigma_noise": 0.1,
        "n_obs": 30,
        "tau_min": 1e-2,
        "tau_max": 1e5,
        "prior_var": 100.0,
        "a0": 1.0,
        "b0": 1.0,
        "grid_points": 300,
        "band_level": 0.95,
        "data": None,
    },
    "manifold": {"tau_min": 1e-2, "tau_max": 1e5},
    "sir": {
        "alpha": 2.5,
        "beta": 0.02,
        "I0": 5,
        "N_pop": 261,
        "n_days": 136,
        "b_start": 2.0,
        "b_end": 26.0,
        "h": 0.1,
        "i0_mean": 5.0,
        "data": None,
    },
    "ricker-abc": {
        "r": math.exp(3.8),
        "sigma2_e": 0.09,
        "phi": 10.0,
        "n_obs": 50,
        "N0": 1.0,
        "replicates": 100,
        "eps": list(RICKER_EPS),
        "summary_order": list(range(7)),
        "acceptance_floor": 1e-5,
        "data": None,
    },
}

TOP_KEYS = ("experiment", "seed", "particles", "stages", "sweeps", "threads", "out", "checkpoints", "resample", "model")


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    particles: Optional[int] = None
    stages: Optional[int] = None
    sweeps: Optional[int] = None
    threads: Any = 1
    out: str = "scmc_out"
    checkpoints: Optional[list] = None
    resample: str = "systematic"
    model: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in TOP_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = sorted(set(d) - set(TOP_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if "experiment" not in d:
            raise ConfigError("experiment: required")
        return validate(cls(**copy.deepcopy(d)))


def _int(name, v, lo=None, hi=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise ConfigError(f"{name}: expected an integer, got {v!r}")
    v = int(v)
    if lo is not None and v < lo:
        raise ConfigError(f"{name}: must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{name}: must be <= {hi}, got {v}")
    return v


def _pos(name, v, allow_zero=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{name}: expected a finite number, got {v!r}")
    if v < 0 or (v == 0 and not allow_zero):
        raise ConfigError(f"{name}: must be {'non-negative' if allow_zero else 'positive'}, got {v}")
    return float(v)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill defaults and check every field; raises ConfigError naming the field."""
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: must be one of {', '.join(EXPERIMENTS)}, got {cfg.experiment!r}")
    exp = cfg.experiment
    run = RUN_DEFAULTS[exp]
    cfg.seed = _int("seed", cfg.seed, 0, 2**64 - 1)
    cfg.particles = _int("particles", run["particles"] if cfg.particles is None else cfg.particles, 2)
    cfg.stages = _int("stages", run["stages"] if cfg.stages is None else cfg.stages, 1)
    cfg.sweeps = _int("sweeps", run["sweeps"] if cfg.sweeps is None else cfg.sweeps, 1)
    if cfg.threads != "auto":
        cfg.threads = _int("threads", cfg.threads, 1)
    if not isinstance(cfg.out, str) or not cfg.out:
        raise ConfigError("out: expected a directory path")
    if cfg.resample not in ("systematic", "multinomial"):
        raise ConfigError(f"resample: must be systematic or multinomial, got {cfg.resample!r}")
    if not isinstance(cfg.model, dict):
        raise ConfigError("model: expected an object")
    unknown = sorted(set(cfg.model) - set(MODEL_DEFAULTS[exp]))
    if unknown:
        raise ConfigError(f"model: unknown key(s) for {exp}: {', '.join(unknown)}")
    model = copy.deepcopy(MODEL_DEFAULTS[exp])
    model.update(cfg.model)
    cfg.model = _VALIDATORS[exp](cfg, model)
    first = 1 if exp == "ricker-abc" else 0
    if cfg.checkpoints is not None:
        if not isinstance(cfg.checkpoints, list):
            raise ConfigError("checkpoints: expected a list of stage indices")
        cfg.checkpoints = sorted({_int("checkpoints", c, first, cfg.stages) for c in cfg.checkpoints})
    return cfg


def _check_data(model):
    if model["data"] is not None and not Path(model["data"]).is_file():
        raise ConfigError(f"model.data: file not found: {model['data']}")


def _monotone(cfg, m):
    if m["toy"] not in ("f1", "f2", "f3"):
        raise ConfigError(f"model.toy: must be f1, f2 or f3, got {m['toy']!r}")
    m["order"] = _int("model.order", m["order"], 1)
    m["n_obs"] = _int("model.n_obs", m["n_obs"], m["order"] + 1)
    m["grid_points"] = _int("model.grid_points", m["grid_points"], 2)
    for k in ("sigma_noise",):
        m[k] = _pos(f"model.{k}", m[k], allow_zero=True)
    for k in ("tau_min", "tau_max", "prior_var", "a0", "b0"):
        m[k] = _pos(f"model.{k}", m[k])
    if m["tau_min"] > m["tau_max"]:
        raise ConfigError("model.tau_min: must not exceed tau_max")
    if not 0 < m["band_level"] < 1:
        raise ConfigError("model.band_level: must lie in (0, 1)")
    if cfg.particles < 100:
        raise ConfigError("particles: credible bands need at least 100 particles")
    _check_data(m)
    return m


def _manifold(cfg, m):
    for k in ("tau_min", "tau_max"):
        m[k] = _pos(f"model.{k}", m[k])
    if m["tau_min"] > m["tau_max"]:
        raise ConfigError("model.tau_min: must not exceed tau_max")
    return m


def _sir(cfg, m):
    for k in ("alpha", "beta", "h", "i0_mean", "b_start", "b_end"):
        m[k] = _pos(f"model.{k}", m[k])
    m["I0"] = _int("model.I0", m["I0"], 1)
    m["N_pop"] = _int("model.N_pop", m["N_pop"], 1)
    m["n_days"] = _int("model.n_days", m["n_days"], 1)
    if m["I0"] > m["N_pop"]:
        raise ConfigError("model.I0: must not exceed N_pop")
    if m["b_start"] > m["b_end"]:
        raise ConfigError("model.b_start: must not exceed b_end")
    if cfg.stages < 2:
        raise ConfigError("stages: the relaxation schedule needs at least 2 stages")
    _check_data(m)
    return m


def _ricker(cfg, m):
    for k in ("r", "sigma2_e", "phi", "N0", "acceptance_floor"):
        m[k] = _pos(f"model.{k}", m[k])
    m["n_obs"] = _int("model.n_obs", m["n_obs"], 1)
    m["replicates"] = _int("model.replicates", m["replicates"], 1)
    eps = m["eps"]
    order = m["summary_order"]
    if not isinstance(eps, list) or not isinstance(order, list) or len(eps) != len(order) or not eps:
        raise ConfigError("model.eps: eps and summary_order must be lists of equal length")
    m["eps"] = [_pos("model.eps", e) for e in eps]
    m["summary_order"] = [_int("model.summary_order", s, 0, 6) for s in order]
    if cfg.stages > len(eps):
        raise ConfigError(f"stages: at most {len(eps)} summaries are configured, got {cfg.stages}")
    _check_data(m)
    return m


_VALIDATORS = {"monotone": _monotone, "manifold": _manifold, "sir": _sir, "ricker-abc": _ricker}


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON in {path}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be an object")
    return d


def parse_config(experiment: str, path=None, **overrides) -> ExperimentConfig:
    """Merge a JSON file (if any) with flag overrides; flags win.

    Overrides whose value is ``None`` are ignored; keys in ``MODEL_DEFAULTS``
    go into ``model``.
    """
    d = load_config_file(path) if path else {}
    if d.get("experiment", experiment) != experiment:
        raise ConfigError(f"experiment: config file is for {d['experiment']!r}, not {experiment!r}")
    d["experiment"] = experiment
    model = dict(d.get("model") or {})
    for k, v in overrides.items():
        if v is None:
            continue
        if k in TOP_KEYS:
            d[k] = v
        else:
            model[k] = v
    d["model"] = model
    return ExperimentConfig.from_dict(d)
