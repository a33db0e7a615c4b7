"""Metropolis-Hastings mutation kernels.

A kernel is a log target plus one proposal per parameter component; one
sweep updates the components in turn (Metropolis-within-Gibbs).  All moves
are vectorised over a batch of particles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .errors import OutsideSupportError
from .particles import ParticleEnsemble, normalize, weighted_std

log = logging.getLogger(__name__)

LOW_ACCEPTANCE = 0.05


class Proposal:
    """Single-component proposal.  ``propose`` returns (new, log q fwd, log q bwd)."""

    symmetric = True

    def propose(self, current: np.ndarray, rng: np.random.Generator):
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianStep(Proposal):
    scale: float

    def propose(self, current, rng):
        step = rng.standard_normal(current.shape) * self.scale
        zero = np.zeros(current.shape)
        return current + step, zero, zero


@dataclass(frozen=True)
class IntegerStep(Proposal):
    """Symmetric +/-``step`` integer walk; out-of-range states get zero density
    from the target and are rejected there."""

    step: int = 1

    def propose(self, current, rng):
        sign = np.where(rng.random(current.shape) < 0.5, -1.0, 1.0)
        zero = np.zeros(current.shape)
        return current + sign * self.step, zero, zero


@dataclass(frozen=True)
class GridStep(Proposal):
    """Uniform move to one of the other points of a finite grid."""

    values: tuple

    def propose(self, current, rng):
        grid = np.asarray(self.values, dtype=float)
        pos = np.searchsorted(grid, current)
        pos = np.clip(pos, 0, grid.size - 1)
        shift = rng.integers(1, grid.size, size=current.shape)
        new = grid[(pos + shift) % grid.size]
        zero = np.zeros(current.shape)
        return new, zero, zero


def chi2_logpdf(x, df):
    x = np.asarray(x, dtype=float)
    df = np.asarray(df, dtype=float)
    half = 0.5 * df
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (half - 1.0) * np.log(x) - 0.5 * x - half * np.log(2.0) - gammaln(half)
    return np.where((x > 0) & (df > 0), out, -np.inf)


def chi_square_proposal(current, rng: np.random.Generator):
    """Draw from a chi-square whose degrees of freedom equal ``current``.

    Returns ``(proposed, log_q_forward, log_q_backward)`` where the backward
    density is that of returning to ``current`` from ``proposed``.
    """
    current = np.asarray(current, dtype=float)
    if np.any(current <= 0) or not np.all(np.isfinite(current)):
        raise ValueError("chi-square proposal needs a positive current value")
    proposed = rng.gamma(0.5 * current, 2.0)
    return proposed, chi2_logpdf(proposed, current), chi2_logpdf(current, proposed)


@dataclass(frozen=True)
class ChiSquareStep(Proposal):
    symmetric = False

    def propose(self, current, rng):
        return chi_square_proposal(current, rng)


@dataclass(frozen=True)
class MutationKernel:
    log_target: Callable[[np.ndarray], np.ndarray]
    proposals: tuple
    sweeps: int = 1

    def __post_init__(self):
        if self.sweeps < 1:
            raise ValueError("sweeps must be positive")


@dataclass
class MoveResult:
    particles: np.ndarray
    log_target: np.ndarray
    accepted: np.ndarray  # (n, sweeps, d) booleans


def _check_cover(kernel, d):
    if len(kernel.proposals) != d:
        raise ValueError(f"kernel has {len(kernel.proposals)} proposals for {d} components")


def mh_sweeps(theta, kernel: MutationKernel, rng, log_target=None) -> MoveResult:
    """Run ``kernel.sweeps`` componentwise MH sweeps on a batch ``(n, d)``."""
    theta = np.array(theta, dtype=float, copy=True)
    n, d = theta.shape
    _check_cover(kernel, d)
    lp = kernel.log_target(theta) if log_target is None else np.array(log_target, dtype=float)
    if np.any(lp == -np.inf) or np.isnan(lp).any():
        raise OutsideSupportError("particle outside support")
    accepted = np.zeros((n, kernel.sweeps, d), dtype=bool)
    for s in range(kernel.sweeps):
        for j, prop in enumerate(kernel.proposals):
            cur = theta[:, j]
            new_j, lq_f, lq_b = prop.propose(cur, rng)
            cand = theta.copy()
            cand[:, j] = new_j
            with np.errstate(invalid="ignore", over="ignore"):
                lp_new = np.asarray(kernel.log_target(cand), dtype=float)
                log_ratio = lp_new - lp + lq_b - lq_f
            log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
            u = rng.random(n)
            acc = np.log(u) < log_ratio
            theta[acc, j] = new_j[acc]
            lp = np.where(acc, lp_new, lp)
            accepted[:, s, j] = acc
    return MoveResult(theta, lp, accepted)


def mh_move(theta, kernel: MutationKernel, rng):
    """Apply ``kernel.sweeps`` full MH sweeps to a single parameter vector.

    Returns ``(theta_new, accepted)`` with ``accepted`` of shape
    ``(sweeps, d)``: one flag per component update.
    """
    theta = np.asarray(theta, dtype=float)
    res = mh_sweeps(theta[None, :], kernel, rng)
    return res.particles[0], res.accepted[0]


@dataclass
class RandomWalkKernels:
    """Stage-adapted random-walk kernels for a density sequence.

    Gaussian scale for component i at stage t is
    ``multiplier_i * base_fraction * weighted_sd_i`` of the current ensemble.
    With ``adapt`` the multipliers follow the previous stage's acceptance:
    ``m_i <- m_i * exp(acc_i - target_acceptance)`` (between stages only).
    """

    log_kernel: Callable[[np.ndarray, int], np.ndarray]
    discrete: Sequence[bool]
    sweeps: int = 1
    base_fraction: float = 0.5
    adapt: bool = True
    target_acceptance: float = 0.3
    integer_step: int = 1
    multipliers: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.discrete = tuple(bool(x) for x in self.discrete)
        if self.multipliers is None:
            self.multipliers = np.ones(len(self.discrete))

    def __call__(self, t: int, ensemble: ParticleEnsemble) -> MutationKernel:
        sd = weighted_std(ensemble.particles, normalize(ensemble.log_weights))
        props = []
        for i, disc in enumerate(self.discrete):
            if disc:
                props.append(IntegerStep(self.integer_step))
            else:
                props.append(GaussianStep(float(self.multipliers[i] * self.base_fraction * sd[i])))
        return MutationKernel(lambda th, _t=t: self.log_kernel(th, _t), tuple(props), self.sweeps)

    def adapt_to(self, acceptance_by_component: np.ndarray) -> None:
        if not self.adapt:
            return
        for i, disc in enumerate(self.discrete):
            if not disc:
                self.multipliers[i] *= np.exp(acceptance_by_component[i] - self.target_acceptance)


def warn_low_acceptance(t, rate):
    if rate < LOW_ACCEPTANCE:
        log.warning("stage %d: MH acceptance %.4f below %.2f", t, rate, LOW_ACCEPTANCE)
