"""Experiment dispatch and file outputs."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import rng as streams
from .abc import (
    MatchCriteria,
    RickerParams,
    load_counts_csv,
    ricker_model,
    ricker_simulate,
    run_scmc_abc,
    summaries,
)
from .config import ExperimentConfig
from .constraints import TauSchedule, manifold_sequence
from .engine import default_checkpoints, run_scmc
from .kernels import RandomWalkKernels
from .ode import (
    SIRParams,
    build_relax_sequence,
    default_obs_times,
    default_relax_schedule,
    load_deaths_csv,
    sir_synthetic_data,
)
from .particles import ParticleEnsemble, ResampleMethod
from .regression import (
    NIGHyper,
    generate_toy_data,
    make_poly_model,
    monotone_sequence,
    posterior_bands,
)

log = logging.getLogger(__name__)


def _fmt(x) -> str:
    return repr(float(x))


def write_particles(path, t, ensemble: ParticleEnsemble, names):
    w = ensemble.weights
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["stage", "particle", "weight", *names])
        for j, (wj, row) in enumerate(zip(w, ensemble.particles)):
            out.writerow([t, j, _fmt(wj), *(_fmt(v) for v in row)])


def read_particles(path):
    """Read a particle CSV back as ``(stage, weights, params, names)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][3:]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return int(data[0, 0]), data[:, 2], data[:, 3:], names


def write_columns(path, header, columns):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in zip(*columns):
            out.writerow([_fmt(v) for v in row])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _checkpoint_writer(out: Path, names, extra=None):
    def write(t, ens):
        write_particles(out / f"particles_stage{t}.csv", t, ens, names)
        if extra is not None:
            extra(t, ens)

    return write


def _run_monotone(cfg: ExperimentConfig, out: Path):
    m = cfg.model
    if m["data"] is not None:
        x, y = _load_xy(m["data"])
    else:
        x, y = generate_toy_data(m["toy"], m["n_obs"], m["sigma_noise"], streams.stream(cfg.seed, streams.DATA))
    write_columns(out / "data.csv", ["x", "y"], [x, y])
    model = make_poly_model(x, m["order"])
    hyper = NIGHyper(np.zeros(m["order"] + 1), m["prior_var"] * np.eye(m["order"] + 1), m["a0"], m["b0"])
    schedule = TauSchedule.geometric(m["tau_min"], m["tau_max"], cfg.stages)
    seq = monotone_sequence(model, y, schedule, hyper)
    grid = np.linspace(0.0, 1.0, m["grid_points"])

    def bands(t, ens):
        mean, lo, hi = posterior_bands(ens.particles[:, :-1], ens.weights, grid, m["band_level"])
        write_columns(out / f"bands_stage{t}.csv", ["grid", "mean", "lower", "upper"], [grid, mean, lo, hi])

    return _run_smc(cfg, seq, out, bands)


def _load_xy(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and r[0].strip()]
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    data = np.array([[float(v) for v in r[:2]] for r in rows])
    return data[:, 0], data[:, 1]


def _run_manifold(cfg, out):
    m = cfg.model
    seq = manifold_sequence(TauSchedule.geometric(m["tau_min"], m["tau_max"], cfg.stages))
    return _run_smc(cfg, seq, out)


def _run_sir(cfg, out):
    m = cfg.model
    if m["data"] is not None:
        t_obs, y = load_deaths_csv(m["data"])
    else:
        t_obs = default_obs_times(m["n_days"])
        truth = SIRParams(m["alpha"], m["beta"], m["I0"], m["N_pop"])
        y = sir_synthetic_data(truth, t_obs, streams.stream(cfg.seed, streams.DATA), m["h"])
    write_columns(out / "data.csv", ["day", "removed"], [t_obs, y])
    n_b = cfg.stages // 2
    stages = default_relax_schedule(m["b_start"], m["b_end"], n_b, cfg.stages - n_b)
    seq = build_relax_sequence(stages, y, t_obs, m["h"], m["N_pop"], m["i0_mean"])
    return _run_smc(cfg, seq, out)


def _run_smc(cfg, seq, out, extra=None):
    kernels = RandomWalkKernels(seq.log_kernel, seq.discrete, sweeps=cfg.sweeps)
    checkpoints = cfg.checkpoints if cfg.checkpoints is not None else default_checkpoints(seq.T)
    res = run_scmc(
        seq,
        kernels,
        n_particles=cfg.particles,
        seed=cfg.seed,
        threads=cfg.threads,
        resample_method=ResampleMethod(cfg.resample),
        checkpoint_stages=checkpoints,
        on_checkpoint=_checkpoint_writer(out, seq.names, extra),
    )
    write_particles(out / "particles_final.csv", seq.T, res.ensemble, seq.names)
    return res.trace


def _run_ricker(cfg, out):
    m = cfg.model
    if m["data"] is not None:
        y = load_counts_csv(m["data"])
    else:
        truth = RickerParams(m["r"], m["sigma2_e"], m["phi"])
        y = ricker_simulate(truth, m["n_obs"], m["N0"], streams.stream(cfg.seed, streams.DATA))
    write_columns(out / "data.csv", ["index", "count"], [np.arange(y.size), y])
    model = ricker_model(int(y.size), m["N0"])
    crit = MatchCriteria(tuple(m["eps"]), tuple(m["summary_order"]))
    res = run_scmc_abc(
        model,
        summaries(y),
        crit,
        n_particles=cfg.particles,
        replicates=m["replicates"],
        seed=cfg.seed,
        sweeps=cfg.sweeps,
        threads=cfg.threads,
        resample_method=ResampleMethod(cfg.resample),
        acceptance_floor=m["acceptance_floor"],
        stages=cfg.stages,
        checkpoint_stages=cfg.checkpoints,
        on_checkpoint=_checkpoint_writer(out, model.names),
    )
    write_particles(out / "particles_final.csv", cfg.stages, res.ensemble, model.names)
    return res.trace


_RUNNERS = {"monotone": _run_monotone, "manifold": _run_manifold, "sir": _run_sir, "ricker-abc": _run_ricker}


def _scrub(obj):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _scrub(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_scrub(v) for v in obj]
    return obj


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run a validated experiment and write its files into ``cfg.out``.

    Errors from the samplers propagate; the CLI maps them to exit codes.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    trace = _RUNNERS[cfg.experiment](cfg, out)
    elapsed = time.time() - started
    write_json(out / "trace.json", _scrub(trace.to_dict()))
    conf = cfg.to_dict()
    runtime = {"threads": conf.pop("threads"), "wall_clock_s": elapsed, "started_unix": started}
    write_json(out / "meta.json", {"seed": cfg.seed, "config": _scrub(conf), "runtime": runtime})
    return 0
