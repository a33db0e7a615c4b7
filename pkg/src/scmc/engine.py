"""The generic sequential sampler: reweight, conditionally resample, mutate.

Stage t of a run moves a weighted sample of ``pi_{t-1}`` to one of
``pi_t``.  Incremental weights use the ratio ``eta_t / eta_{t-1}`` at the
current particles, so they do not depend on the mutation kernel; the MCMC
move happens after resampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as streams
from .errors import DegenerateEnsembleError, SupportWideningError
from .kernels import MutationKernel, mh_sweeps, warn_low_acceptance
from .particles import ParticleEnsemble, ResampleMethod, ess, log_normalize, resample_indices, normalize

log = logging.getLogger(__name__)


@dataclass
class DensitySequence:
    """Indexed family of unnormalised log kernels ``log eta_t``.

    ``log_kernel(theta, t)`` takes a batch ``(n, d)`` and returns ``(n,)``.
    ``sampler0(rng, n)`` draws ``n`` particles exactly from ``pi_0``.
    ``stages[t]`` holds the constraint parameter(s) of stage t as a dict.
    """

    stages: list
    log_kernel: Callable[[np.ndarray, int], np.ndarray]
    sampler0: Callable[[np.random.Generator, int], np.ndarray]
    names: tuple = ()
    discrete: tuple = ()

    @property
    def T(self) -> int:
        return len(self.stages) - 1

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("a density sequence needs at least one stage")
        self.stages = [dict(s) for s in self.stages]


@dataclass
class StageRecord:
    t: int
    constraint: dict
    ess: float
    resampled: bool
    acceptance: Optional[float] = None
    acceptance_by_component: Optional[list] = None

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "constraint": self.constraint,
            "ess": self.ess,
            "resampled": self.resampled,
            "acceptance": self.acceptance,
            "acceptance_by_component": self.acceptance_by_component,
        }


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def ess(self) -> np.ndarray:
        return np.array([r.ess for r in self.records])

    def to_dict(self) -> dict:
        return {"stages": [r.to_dict() for r in self.records]}


def _log_kernel(seq: DensitySequence, theta, t, threads=1) -> np.ndarray:
    def work(_i, sl):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return np.asarray(seq.log_kernel(theta[sl], t), dtype=float)

    return np.concatenate(streams.map_chunks(work, theta.shape[0], threads))


def incremental_from_values(prev: np.ndarray, new: np.ndarray) -> np.ndarray:
    prev = np.asarray(prev, dtype=float)
    new = np.asarray(new, dtype=float)
    widened = (prev == -np.inf) & (new > -np.inf)
    if widened.any():
        raise SupportWideningError(
            f"support widening violates sequence ({int(widened.sum())} particles)"
        )
    with np.errstate(invalid="ignore"):
        inc = new - prev
    # zero before and after: the particle stays at zero weight
    inc[(prev == -np.inf) & (new == -np.inf)] = -np.inf
    if np.isnan(inc).any():
        raise DegenerateEnsembleError("degenerate ensemble: NaN incremental weight")
    return inc


def incremental_weights(ensemble: ParticleEnsemble, seq: DensitySequence, t: int) -> np.ndarray:
    """Log increments ``log eta_t(theta) - log eta_{t-1}(theta)`` per particle."""
    if not 1 <= t <= seq.T:
        raise ValueError(f"stage {t} outside 1..{seq.T}")
    prev = _log_kernel(seq, ensemble.particles, t - 1)
    new = _log_kernel(seq, ensemble.particles, t)
    return incremental_from_values(prev, new)


def default_checkpoints(T: int) -> list:
    step = max(1, math.ceil(T / 10))
    return sorted(set([0, T] + list(range(0, T + 1, step))))


@dataclass
class SMCResult:
    ensemble: ParticleEnsemble
    trace: RunTrace
    log_kernel_values: np.ndarray


def _mutate(seq, kernel: MutationKernel, theta, lp, seed, t, threads):
    n, d = theta.shape
    movable = np.isfinite(lp)

    def work(ci, sl):
        gen = streams.stream(seed, streams.MUTATE, t, ci)
        sub = theta[sl]
        m = movable[sl]
        out = sub.copy()
        out_lp = lp[sl].copy()
        acc = np.zeros((sub.shape[0], kernel.sweeps, d), dtype=bool)
        if m.any():
            res = mh_sweeps(sub[m], kernel, gen, log_target=lp[sl][m])
            out[m] = res.particles
            out_lp[m] = res.log_target
            acc[m] = res.accepted
        return out, out_lp, acc

    parts = streams.map_chunks(work, n, threads)
    new_theta = np.concatenate([p[0] for p in parts])
    new_lp = np.concatenate([p[1] for p in parts])
    acc = np.concatenate([p[2] for p in parts])
    return new_theta, new_lp, acc[movable]


def run_scmc(
    seq: DensitySequence,
    kernel_factory: Optional[Callable[[int, ParticleEnsemble], Optional[MutationKernel]]],
    *,
    n_particles: int,
    seed: int = 0,
    threads=1,
    resample_method=ResampleMethod.SYSTEMATIC,
    ess_fraction: float = 0.5,
    checkpoint_stages: Optional[Sequence[int]] = None,
    on_checkpoint: Optional[Callable[[int, ParticleEnsemble], None]] = None,
) -> SMCResult:
    """Run the sampler through every stage of ``seq``.

    Per stage t = 1..T: add log increments to the log weights, normalise,
    resample if ESS < ``ess_fraction * N`` (weights reset to 1/N), then
    mutate every particle with ``kernel_factory(t, ensemble)``.  A factory
    returning ``None`` leaves particles in place.  If the factory has an
    ``adapt_to`` method it receives the per-component acceptance rates
    after each stage.

    Checkpoints record the weighted ensemble after reweighting and before
    resampling (a weighted sample of ``pi_t``), so their ESS equals the
    traced ESS.  The trace holds T + 1 records; stage 0 is the exact
    initial draw with uniform weights.
    """
    if n_particles < 2:
        raise ValueError("need at least two particles")
    if seq.T < 1:
        raise ValueError("need at least one stage after stage 0")
    threads = streams.resolve_threads(threads)
    if checkpoint_stages is None:
        checkpoint_stages = default_checkpoints(seq.T)
    checkpoint_stages = set(int(c) for c in checkpoint_stages)
    trace = RunTrace()

    def init(ci, sl):
        gen = streams.stream(seed, streams.INIT, 0, ci)
        return np.asarray(seq.sampler0(gen, sl.stop - sl.start), dtype=float).reshape(sl.stop - sl.start, -1)

    theta = np.concatenate(streams.map_chunks(init, n_particles, threads))
    lw = np.full(n_particles, -np.log(n_particles))
    lp = _log_kernel(seq, theta, 0, threads)
    if not np.all(np.isfinite(lp)):
        raise DegenerateEnsembleError("initial draw has particles outside the stage-0 support")
    trace.records.append(StageRecord(0, seq.stages[0], float(n_particles), False))
    if 0 in checkpoint_stages:
        _checkpoint(trace, on_checkpoint, 0, theta, lw)

    for t in range(1, seq.T + 1):
        new_lp = _log_kernel(seq, theta, t, threads)
        inc = incremental_from_values(lp, new_lp)
        lp = new_lp
        try:
            lw = log_normalize(lw + inc)
        except DegenerateEnsembleError:
            raise DegenerateEnsembleError(
                f"degenerate ensemble at stage {t} (constraint {seq.stages[t]}): every particle has zero weight"
            ) from None
        stage_ess = ess(lw)
        if t in checkpoint_stages:
            _checkpoint(trace, on_checkpoint, t, theta, lw)
        resampled = stage_ess < ess_fraction * n_particles
        if resampled:
            idx = resample_indices(normalize(lw), resample_method, streams.stream(seed, streams.RESAMPLE, t))
            theta = theta[idx]
            lp = lp[idx]
            lw = np.full(n_particles, -np.log(n_particles))
        record = StageRecord(t, seq.stages[t], stage_ess, bool(resampled))
        kernel = kernel_factory(t, ParticleEnsemble(theta, lw)) if kernel_factory is not None else None
        if kernel is not None:
            theta, lp, acc = _mutate(seq, kernel, theta, lp, seed, t, threads)
            by_comp = acc.mean(axis=(0, 1)) if acc.size else np.zeros(theta.shape[1])
            record.acceptance = float(acc.mean()) if acc.size else 0.0
            record.acceptance_by_component = [float(a) for a in by_comp]
            warn_low_acceptance(t, record.acceptance)
            if hasattr(kernel_factory, "adapt_to"):
                kernel_factory.adapt_to(by_comp)
        trace.records.append(record)
        log.debug("stage %d %s ess=%.1f resampled=%s acc=%s", t, seq.stages[t], stage_ess, resampled, record.acceptance)

    return SMCResult(ParticleEnsemble(theta, lw), trace, lp)


def _checkpoint(trace, callback, t, theta, lw):
    ens = ParticleEnsemble(theta.copy(), lw.copy())
    trace.checkpoints[t] = ens
    if callback is not None:
        callback(t, ens)


def _check_sampler(sampler0):
    if sampler0 is None:
        raise ValueError("a sampler for the stage-0 distribution is required")


def power_posterior_sequence(log_prior, log_lik, temps, sampler0, names=()) -> DensitySequence:
    """Likelihood-tempered sequence ``log eta_t = log prior + temp_t * log lik``."""
    temps = np.asarray(temps, dtype=float)
    if temps.size < 2 or temps[0] != 0.0 or temps[-1] != 1.0 or np.any(np.diff(temps) <= 0):
        raise ValueError("temperatures must increase strictly from 0 to 1")
    _check_sampler(sampler0)

    def log_kernel(theta, t):
        lp = np.asarray(log_prior(theta), dtype=float)
        if temps[t] == 0.0:
            return lp
        return lp + temps[t] * np.asarray(log_lik(theta), dtype=float)

    return DensitySequence([{"temperature": float(x)} for x in temps], log_kernel, sampler0, tuple(names))


def data_tempering_sequence(log_prior, per_datum_log_lik, data, counts, sampler0, names=()) -> DensitySequence:
    """Sequence that includes the first ``counts[t]`` observations at stage t.

    ``per_datum_log_lik(y_i, theta)`` returns the ``(n,)`` log likelihood of a
    single observation.
    """
    counts = np.asarray(counts)
    n = len(data)
    if counts.size < 2 or counts[0] != 0 or np.any(np.diff(counts) < 0):
        raise ValueError("counts must be non-decreasing integers starting at 0")
    if counts[-1] > n or np.any(counts > n):
        raise ValueError(f"counts exceed the {n} available observations")
    if counts[-1] != n:
        raise ValueError(f"counts must end at n={n}")
    if not np.all(np.equal(np.mod(counts, 1), 0)):
        raise ValueError("counts must be integers")
    _check_sampler(sampler0)

    def log_kernel(theta, t):
        out = np.asarray(log_prior(theta), dtype=float).copy()
        for i in range(int(counts[t])):
            out = out + np.asarray(per_datum_log_lik(data[i], theta), dtype=float)
        return out

    return DensitySequence([{"count": int(c)} for c in counts], log_kernel, sampler0, tuple(names))
