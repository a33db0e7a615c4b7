"""Likelihood-free sequential sampling with nested summary-statistic matching.

Stage t accepts a simulated dataset when its first t summaries each fall
within their tolerance of the observed ones.  Every particle carries M
replicate datasets (stored as their summary vectors); its weight at stage
t is the number of replicates that match.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from . import rng as streams
from .engine import RunTrace, StageRecord
from .errors import DegenerateEnsembleError, NumericalError
from .kernels import ChiSquareStep, GridStep, warn_low_acceptance
from .particles import ParticleEnsemble, ResampleMethod, ess, log_normalize, normalize, resample_indices

log = logging.getLogger(__name__)

RICKER_NAMES = ("r", "sigma2_e", "phi")
RICKER_EPS = (1.0, 1.88, 6.25, 1.0, 2.0, 10.0, 35.0)
SUMMARY_NAMES = ("median", "mean", "mean_above_1", "count_above_10", "count_zero", "q75", "max")
OVERFLOW = 1e12


@dataclass(frozen=True)
class RickerParams:
    r: float
    sigma2_e: float
    phi: float

    def __post_init__(self):
        if min(self.r, self.sigma2_e, self.phi) <= 0:
            raise ValueError("Ricker parameters must be positive")

    def as_array(self):
        return np.array([self.r, self.sigma2_e, self.phi])


def ricker_simulate_batch(theta, n: int, rng, replicates: int = 1, N0: float = 1.0, population: bool = False):
    """Simulate ``replicates`` count series of length ``n`` per row of ``theta``.

    ``theta`` is ``(k, 3)`` with columns (r, sigma2_e, phi).  Returns
    ``(counts (k, replicates, n), ok (k, replicates))``; series whose
    population exceeds the overflow bound are flagged not ok.  With
    ``population`` the latent path ``N_1..N_n`` is appended to the result.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    k = theta.shape[0]
    r = theta[:, 0, None]
    sd = np.sqrt(theta[:, 1, None])
    phi = theta[:, 2, None]
    pop = np.full((k, replicates), float(N0))
    ok = np.ones((k, replicates), dtype=bool)
    counts = np.empty((k, replicates, n), dtype=np.int64)
    path = np.empty((k, replicates, n)) if population else None
    noise = rng.standard_normal((n, k, replicates))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            pop = r * pop * np.exp(-pop + sd * noise[i])
            bad = ~(pop <= OVERFLOW)
            if bad.any():
                ok &= ~bad
                pop = np.where(bad, 0.0, pop)
            if population:
                path[:, :, i] = pop
            counts[:, :, i] = rng.poisson(phi * pop)
    if population:
        return counts, ok, path
    return counts, ok


def ricker_simulate(params: RickerParams, n: int = 50, N0: float = 1.0, rng=None) -> np.ndarray:
    """One observed series: ``N <- r N exp(-N + e)``, ``y ~ Poisson(phi N)``."""
    rng = rng or np.random.default_rng()
    counts, ok = ricker_simulate_batch(params.as_array()[None, :], n, rng, 1, N0)
    if not ok.all():
        raise NumericalError(f"Ricker population overflow for {params}")
    return counts[0, 0]


def summaries(y) -> np.ndarray:
    """The seven count summaries over the last axis of ``y``.

    (median, mean, mean of values > 1, #values > 10, #zeros, 75% quantile, max);
    the mean over values > 1 is 0 when there are none.
    """
    y = np.asarray(y, dtype=float)
    ys = np.sort(y, axis=-1)
    above1 = y > 1
    n_above = above1.sum(axis=-1)
    sum_above = np.where(above1, y, 0.0).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_above = np.where(n_above > 0, sum_above / np.maximum(n_above, 1), 0.0)
    return np.stack(
        [
            np.median(ys, axis=-1),
            y.mean(axis=-1),
            mean_above,
            (y > 10).sum(axis=-1).astype(float),
            (y == 0).sum(axis=-1).astype(float),
            np.quantile(ys, 0.75, axis=-1),
            ys[..., -1],
        ],
        axis=-1,
    )


@dataclass(frozen=True)
class MatchCriteria:
    """Tolerances for the summaries, in inclusion order.

    ``order[j]`` names which summary column enters at stage j+1; repeats
    are allowed.  Stage t matches on the first t entries.
    """

    eps: tuple
    order: tuple = ()
    active_count: int = 1

    def __post_init__(self):
        if not self.order:
            object.__setattr__(self, "order", tuple(range(len(self.eps))))
        if len(self.order) != len(self.eps):
            raise ValueError("order and eps must have the same length")
        if not 1 <= self.active_count <= len(self.eps):
            raise ValueError(f"active_count must lie in 1..{len(self.eps)}")
        if any(e <= 0 for e in self.eps):
            raise ValueError("tolerances must be positive")

    @property
    def T(self):
        return len(self.eps)

    def at(self, t: int) -> "MatchCriteria":
        return MatchCriteria(self.eps, self.order, t)


def matches(S, s_obs, crit: MatchCriteria) -> np.ndarray:
    """Boolean match of each replicate summary vector (last axis) against ``s_obs``."""
    S = np.asarray(S, dtype=float)
    s_obs = np.asarray(s_obs, dtype=float)
    idx = np.asarray(crit.order[: crit.active_count])
    eps = np.asarray(crit.eps[: crit.active_count], dtype=float)
    with np.errstate(invalid="ignore"):
        close = np.abs(S[..., idx] - s_obs[idx]) < eps
    return np.all(close, axis=-1)


def match_count(Z_summaries, s_obs, crit: MatchCriteria) -> np.ndarray:
    """Number of replicates per particle inside the stage's matching set.

    ``Z_summaries`` has shape ``(..., M, n_summaries)``; NaN rows never match.
    """
    return matches(Z_summaries, s_obs, crit).sum(axis=-1)


@dataclass
class ABCModel:
    """Prior, simulator and proposals for a likelihood-free problem.

    ``simulate(theta (k, d), rng, M)`` returns replicate summaries of shape
    ``(k, M, n_summaries)`` with NaN rows for failed simulations.
    """

    prior_sample: Callable[[np.random.Generator, int], np.ndarray]
    prior_logpdf: Callable[[np.ndarray], np.ndarray]
    simulate: Callable[[np.ndarray, np.random.Generator, int], np.ndarray]
    proposals: tuple
    names: tuple = ()


@dataclass
class ABCResult:
    ensemble: ParticleEnsemble
    trace: RunTrace
    history: list = field(default_factory=list)
    prior_draws: int = 0


def _simulate_chunked(model, theta, M, seed, key, threads):
    def work(ci, sl):
        gen = streams.stream(seed, *key, ci)
        return model.simulate(theta[sl], gen, M)

    return np.concatenate(streams.map_chunks(work, theta.shape[0], threads))


def _initial_stage(model, s_obs, crit1, n_particles, M, seed, threads, acceptance_floor, batch):
    """Rejection sampling from the prior until ``n_particles`` have ``w > 0``."""
    kept_theta, kept_S, kept_w = [], [], []
    have = 0
    draws = 0
    budget = int(np.ceil(n_particles / acceptance_floor))
    # with no acceptance at all after 1/floor draws the rate is already below the floor
    early = int(np.ceil(1.0 / acceptance_floor))
    b = 0
    while have < n_particles:
        gen = streams.stream(seed, streams.ABC_PRIOR, 0, b)
        theta = np.asarray(model.prior_sample(gen, batch), dtype=float).reshape(batch, -1)
        S = _simulate_chunked(model, theta, M, seed, (streams.ABC_PRIOR, 1, b), threads)
        w = match_count(S, s_obs, crit1)
        pos = np.flatnonzero(w > 0)
        need = n_particles - have
        if pos.size > need:
            # keep acceptances in draw order; the stopping draw defines the count
            draws += int(pos[need - 1]) + 1
            pos = pos[:need]
        else:
            draws += batch
        kept_theta.append(theta[pos])
        kept_S.append(S[pos])
        kept_w.append(w[pos])
        have += pos.size
        b += 1
        if have < n_particles and (draws >= budget or (have == 0 and draws >= early)):
            raise DegenerateEnsembleError(
                f"prior-predictive mismatch: {have} acceptances in {draws} prior draws "
                f"(rate below {acceptance_floor:g})"
            )
    return np.concatenate(kept_theta), np.concatenate(kept_S), np.concatenate(kept_w), draws


def abc_mh_move(model, theta, S, w, s_obs, crit, M, seed, t, sweeps, threads=1):
    """Pseudo-marginal MH on (theta, Z): componentwise proposals, fresh
    replicates for each proposal, match counts in the acceptance ratio.

    Returns ``(theta, S, w, accepted)`` with ``accepted`` of shape
    ``(n, sweeps, d)``; on acceptance theta and its replicates move together.
    """
    n, d = theta.shape
    theta = theta.copy()
    S = S.copy()
    w = w.copy()
    lprior = model.prior_logpdf(theta)
    accepted = np.zeros((n, sweeps, d), dtype=bool)
    for s in range(sweeps):
        for j, prop in enumerate(model.proposals):
            def work(ci, sl, j=j, prop=prop, s=s):
                gen = streams.stream(seed, streams.ABC_MOVE, t, s, j, ci)
                th = theta[sl]
                new_j, lq_f, lq_b = prop.propose(th[:, j], gen)
                cand = th.copy()
                cand[:, j] = new_j
                with np.errstate(invalid="ignore", divide="ignore"):
                    lp_new = np.asarray(model.prior_logpdf(cand), dtype=float)
                live = np.isfinite(lp_new) & np.isfinite(lq_f) & np.isfinite(lq_b)
                S_new = np.full(S[sl].shape, np.nan)
                if live.any():
                    S_new[live] = model.simulate(cand[live], gen, M)
                w_new = match_count(S_new, s_obs, crit)
                with np.errstate(invalid="ignore", divide="ignore"):
                    log_ratio = (lp_new - lprior[sl]) + (lq_b - lq_f) + np.log(w_new) - np.log(w[sl])
                log_ratio = np.where(live & (w_new > 0) & ~np.isnan(log_ratio), log_ratio, -np.inf)
                acc = np.log(gen.random(th.shape[0])) < log_ratio
                return cand, S_new, w_new, lp_new, acc

            parts = streams.map_chunks(work, n, threads)
            cand = np.concatenate([p[0] for p in parts])
            S_new = np.concatenate([p[1] for p in parts])
            w_new = np.concatenate([p[2] for p in parts])
            lp_new = np.concatenate([p[3] for p in parts])
            acc = np.concatenate([p[4] for p in parts])
            theta[acc] = cand[acc]
            S[acc] = S_new[acc]
            w[acc] = w_new[acc]
            lprior[acc] = lp_new[acc]
            accepted[:, s, j] = acc
    return theta, S, w, accepted


def run_scmc_abc(
    model: ABCModel,
    s_obs,
    criteria: MatchCriteria,
    *,
    n_particles: int,
    replicates: int,
    seed: int = 0,
    sweeps: int = 5,
    threads=1,
    resample_method=ResampleMethod.SYSTEMATIC,
    acceptance_floor: float = 1e-5,
    prior_batch: Optional[int] = None,
    stages: Optional[int] = None,
    checkpoint_stages: Optional[Sequence[int]] = None,
    on_checkpoint=None,
) -> ABCResult:
    """Sample the ABC posterior whose matching set uses all summaries.

    Stage 1 is rejection from the prior weighted by match counts, then
    resampling.  Each later stage reweights by ``w_t / w_{t-1}`` on the
    current replicates, resamples, and applies the ABC-MH move.  Stages are
    numbered 1..T; checkpoints hold the weighted ensemble before
    resampling.  Every ensemble carries the replicate summaries
    ``(N, M, n_summaries)`` as its ``aux`` payload.
    """
    if n_particles < 2:
        raise ValueError("need at least two particles")
    if replicates < 1:
        raise ValueError("need at least one replicate per particle")
    threads = streams.resolve_threads(threads)
    T = criteria.T if stages is None else int(stages)
    if not 1 <= T <= criteria.T:
        raise ValueError(f"stages must lie in 1..{criteria.T}")
    if checkpoint_stages is None:
        checkpoint_stages = range(1, T + 1)
    checkpoint_stages = set(checkpoint_stages)
    s_obs = np.asarray(s_obs, dtype=float)
    trace = RunTrace()
    history = []

    batch = prior_batch or max(n_particles, 256)
    theta, S, w, draws = _initial_stage(
        model, s_obs, criteria.at(1), n_particles, replicates, seed, threads, acceptance_floor, batch
    )
    lw = log_normalize(np.log(w.astype(float)))
    for t in range(1, T + 1):
        crit = criteria.at(t)
        if t > 1:
            w_new = match_count(S, s_obs, crit)
            if np.any(w_new > w):
                raise NumericalError("matching sets are not nested")
            with np.errstate(divide="ignore"):
                inc = np.log(w_new.astype(float)) - np.log(w.astype(float))
            w = w_new
            if np.all(w == 0):
                raise DegenerateEnsembleError(f"summary-order degeneracy at stage {t}: no replicate matches")
            lw = log_normalize(inc)
        stage_ess = ess(lw)
        if t in checkpoint_stages:
            ens = ParticleEnsemble(theta.copy(), lw.copy(), S.copy())
            trace.checkpoints[t] = ens
            if on_checkpoint is not None:
                on_checkpoint(t, ens)
        idx = resample_indices(normalize(lw), resample_method, streams.stream(seed, streams.RESAMPLE, t))
        theta, S, w = theta[idx], S[idx], w[idx]
        lw = np.full(n_particles, -np.log(n_particles))
        record = StageRecord(
            t,
            {"summaries": t, "summary": int(criteria.order[t - 1]), "eps": float(criteria.eps[t - 1])},
            stage_ess,
            True,
        )
        if t > 1:
            theta, S, w, acc = abc_mh_move(model, theta, S, w, s_obs, crit, replicates, seed, t, sweeps, threads)
            record.acceptance = float(acc.mean())
            record.acceptance_by_component = [float(a) for a in acc.mean(axis=(0, 1))]
            warn_low_acceptance(t, record.acceptance)
        log.info("abc stage %d ess=%.1f min-ess-fraction=%.3f", t, stage_ess, stage_ess / n_particles)
        trace.records.append(record)
        history.append(theta.copy())
    return ABCResult(ParticleEnsemble(theta, lw, S), trace, history, draws)


# --- Ricker model ------------------------------------------------------------


def ricker_log_prior(theta) -> np.ndarray:
    """log r ~ N(4, 1) (log-normal r), sigma2_e ~ InvGamma(3, 0.5), phi ~ chi2_10."""
    theta = np.atleast_2d(theta)
    r, s2, phi = theta[:, 0], theta[:, 1], theta[:, 2]
    ok = (r > 0) & (s2 > 0) & (phi > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(r)
        lp_r = -0.5 * (lr - 4.0) ** 2 - 0.5 * np.log(2 * np.pi) - lr
        lp_s = 3.0 * np.log(0.5) - gammaln(3.0) - 4.0 * np.log(s2) - 0.5 / s2
        lp_phi = 4.0 * np.log(phi) - 0.5 * phi - 5.0 * np.log(2.0) - gammaln(5.0)
        out = lp_r + lp_s + lp_phi
    return np.where(ok, out, -np.inf)


def ricker_prior_sample(rng, n) -> np.ndarray:
    r = np.exp(rng.normal(4.0, 1.0, n))
    s2 = 0.5 / rng.gamma(3.0, 1.0, n)
    phi = rng.chisquare(10.0, n)
    return np.column_stack([r, s2, phi])


def ricker_model(n: int = 50, N0: float = 1.0) -> ABCModel:
    def simulate(theta, rng, M):
        counts, ok = ricker_simulate_batch(theta, n, rng, M, N0)
        S = summaries(counts)
        S[~ok] = np.nan
        return S

    return ABCModel(
        ricker_prior_sample,
        ricker_log_prior,
        simulate,
        (ChiSquareStep(), ChiSquareStep(), ChiSquareStep()),
        RICKER_NAMES,
    )


def load_counts_csv(path) -> np.ndarray:
    """Read observed counts: one value per row, or a ``count`` column."""
    import csv

    vals = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[-1].strip():
                continue
            try:
                vals.append(float(row[-1]))
            except ValueError:
                if vals:
                    raise
    return np.array(vals)


# --- discrete toy ------------------------------------------------------------


def bernoulli_toy_model(grid=(0.2, 0.5, 0.8), prior=(0.3, 0.4, 0.3), n_trials: int = 5) -> ABCModel:
    """Bernoulli success probability on a finite grid.

    Summaries are (number of successes, first outcome), so exact matching
    (tolerances below 1) gives an enumerable posterior.
    """
    grid = np.asarray(grid, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if grid.shape != prior.shape or not np.isclose(prior.sum(), 1.0) or np.any(prior <= 0):
        raise ValueError("prior must be a positive probability vector matching the grid")
    lprior = np.log(prior)

    def prior_sample(rng, n):
        return grid[rng.choice(grid.size, size=n, p=prior)][:, None]

    def prior_logpdf(theta):
        th = np.atleast_2d(theta)[:, 0]
        pos = np.searchsorted(grid, th).clip(0, grid.size - 1)
        return np.where(grid[pos] == th, lprior[pos], -np.inf)

    def simulate(theta, rng, M):
        th = np.atleast_2d(theta)[:, 0]
        y = rng.random((th.size, M, n_trials)) < th[:, None, None]
        return np.stack([y.sum(axis=-1), y[..., 0]], axis=-1).astype(float)

    return ABCModel(prior_sample, prior_logpdf, simulate, (GridStep(tuple(grid)),), ("p",))


def bernoulli_toy_posterior(s_obs, grid=(0.2, 0.5, 0.8), prior=(0.3, 0.4, 0.3), n_trials: int = 5, active: int = 2):
    """Exact posterior over ``grid`` under exact matching of the first ``active`` summaries."""
    from itertools import product

    grid = np.asarray(grid, dtype=float)
    post = np.zeros(grid.size)
    for outcome in product((0, 1), repeat=n_trials):
        y = np.array(outcome)
        s = (y.sum(), y[0])
        if all(s[j] == s_obs[j] for j in range(active)):
            k = y.sum()
            post += grid**k * (1 - grid) ** (n_trials - k)
    post *= np.asarray(prior)
    return post / post.sum()
