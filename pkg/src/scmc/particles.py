"""Weighted particle ensembles: weight arithmetic, ESS and resampling.

Weights are kept in the log domain throughout; probit factors at large
constraint parameters underflow anything else.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateEnsembleError


class ResampleMethod(str, Enum):
    MULTINOMIAL = "multinomial"
    SYSTEMATIC = "systematic"


@dataclass
class ParticleEnsemble:
    """N parameter vectors with log weights and optional per-particle payloads.

    ``particles`` has shape ``(N, d)``; integer-valued components are stored
    as floats.  ``aux`` is any array whose leading axis has length N; it is
    copied alongside the particles on resampling.
    """

    particles: np.ndarray
    log_weights: np.ndarray
    aux: Optional[Any] = None

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        if self.particles.ndim == 1:
            self.particles = self.particles[:, None]
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        n = self.particles.shape[0]
        if n < 1:
            raise ValueError("ensemble needs at least one particle")
        if self.log_weights.shape != (n,):
            raise ValueError(f"log_weights must have shape ({n},), got {self.log_weights.shape}")
        if np.isnan(self.log_weights).any():
            raise DegenerateEnsembleError("degenerate ensemble: NaN log weight")
        if self.aux is not None and len(self.aux) != n:
            raise ValueError("aux payload must have one entry per particle")

    @classmethod
    def uniform(cls, particles, aux=None) -> "ParticleEnsemble":
        particles = np.asarray(particles, dtype=float)
        n = particles.shape[0]
        return cls(particles, np.full(n, -np.log(n)), aux)

    def __len__(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return normalize(self.log_weights)

    def normalized(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.particles, log_normalize(self.log_weights), self.aux)

    def ess(self) -> float:
        return ess(self.log_weights)


def log_normalize(log_weights) -> np.ndarray:
    """Shift log weights so that their exponentials sum to one."""
    lw = np.asarray(log_weights, dtype=float)
    if np.isnan(lw).any():
        raise DegenerateEnsembleError("degenerate ensemble: NaN log weight")
    if lw.size == 0 or np.all(lw == -np.inf):
        raise DegenerateEnsembleError("all weights zero")
    return lw - logsumexp(lw)


def normalize(log_weights) -> np.ndarray:
    """Normalized (linear-scale) weights from log weights."""
    w = np.exp(log_normalize(log_weights))
    return w / w.sum()


def ess(log_weights) -> float:
    """Effective sample size ``1 / sum(W_j^2)``; lies in ``[1, N]``."""
    try:
        w = normalize(log_weights)
    except DegenerateEnsembleError as exc:
        raise DegenerateEnsembleError(f"degenerate ensemble: {exc}") from None
    return float(1.0 / np.sum(w * w))


def resample_indices(weights, method, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    n = w.size if size is None else size
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    method = ResampleMethod(method)
    if method is ResampleMethod.SYSTEMATIC:
        u = (rng.random() + np.arange(n)) / n
    else:
        u = np.sort(rng.random(n))
    idx = np.searchsorted(cdf, u, side="right")
    # zero-weight particles never get picked, even at cdf plateaus
    return np.minimum(idx, w.size - 1)


def resample(ensemble: ParticleEnsemble, method=ResampleMethod.SYSTEMATIC, rng=None) -> ParticleEnsemble:
    """Resample N particles (and their payloads) in proportion to their weights."""
    if rng is None:
        rng = np.random.default_rng()
    w = normalize(ensemble.log_weights)
    idx = resample_indices(w, method, rng)
    aux = None if ensemble.aux is None else _take(ensemble.aux, idx)
    return ParticleEnsemble.uniform(ensemble.particles[idx].copy(), aux)


def _take(aux, idx):
    if isinstance(aux, np.ndarray):
        return aux[idx].copy()
    import copy

    return [copy.deepcopy(aux[i]) for i in idx]


def weighted_mean(values, weights) -> np.ndarray:
    return np.average(np.asarray(values, dtype=float), axis=0, weights=weights)


def weighted_std(values, weights) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    mu = np.average(values, axis=0, weights=weights)
    var = np.average((values - mu) ** 2, axis=0, weights=weights)
    return np.sqrt(np.maximum(var, 0.0))


def weighted_quantile(values, weights, q) -> np.ndarray:
    """Weighted quantiles along axis 0 using midpoint cumulative weights.

    ``values`` may be ``(N,)`` or ``(N, k)``; ``q`` is a scalar in [0, 1].
    """
    values = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    squeeze = values.ndim == 1
    if squeeze:
        values = values[:, None]
    out = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        order = np.argsort(values[:, j], kind="stable")
        v = values[order, j]
        ws = w[order]
        cw = (np.cumsum(ws) - 0.5 * ws) / ws.sum()
        out[j] = np.interp(q, cw, v)
    return out[0] if squeeze else out
