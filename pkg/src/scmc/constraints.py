"""Probit soft constraints and constraint-parameter schedules.

A constraint is a set of signed margins (positive when satisfied); stage t
multiplies the base density by ``prod_i Phi(tau_t * margin_i)``, which
tends to the indicator of the constraint set as ``tau -> inf``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import log_ndtr

from .engine import DensitySequence

LOG2 = float(np.log(2.0))


@dataclass(frozen=True)
class TauSchedule:
    values: tuple
    spacing: str = "explicit"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size < 2:
            raise ValueError("a schedule needs tau_0 and at least one more value")
        if v[0] != 0.0:
            raise ValueError("tau_0 must be 0")
        # repeated values are allowed: a flat schedule gives the unconstrained sampler
        if np.any(np.diff(v) < 0) or not np.all(np.isfinite(v)):
            raise ValueError("tau values must be finite and non-decreasing")
        object.__setattr__(self, "values", tuple(float(x) for x in v))

    @classmethod
    def linear(cls, tau_max: float, stages: int) -> "TauSchedule":
        return cls(tuple(np.linspace(0.0, tau_max, stages + 1)), "linear")

    @classmethod
    def geometric(cls, tau_min: float, tau_max: float, stages: int) -> "TauSchedule":
        """``0`` followed by ``stages`` geometrically spaced values."""
        if not 0 < tau_min <= tau_max:
            raise ValueError("need 0 < tau_min <= tau_max")
        vals = np.geomspace(tau_min, tau_max, stages) if stages > 1 else np.array([tau_max])
        return cls((0.0, *vals), "geometric-after-zero")

    @classmethod
    def explicit(cls, values: Sequence[float]) -> "TauSchedule":
        return cls(tuple(values), "explicit")

    @property
    def T(self) -> int:
        return len(self.values) - 1

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class ProbitConstraint:
    """``margins(theta)`` returns an ``(n, m)`` array of signed margins."""

    margins: Callable[[np.ndarray], np.ndarray]
    log_offset: float = 0.0

    def log_factor(self, theta, tau) -> np.ndarray:
        m = np.asarray(self.margins(theta), dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        return np.sum(probit_log_factor(m, tau), axis=1) + self.log_offset * m.shape[1]


def probit_log_factor(margin, tau):
    """``log Phi(tau * margin)``, stable far into the lower tail."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be non-negative")
    return log_ndtr(tau * np.asarray(margin, dtype=float))


def manifold_defect(x, y):
    return x * x - (y * y + 1.0)


def manifold_log_target(x, y, tau):
    """Bivariate standard normal times ``2 Phi(-tau |x^2 - (y^2 + 1)|)``, in logs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    base = -0.5 * (x * x + y * y) - np.log(2.0 * np.pi)
    return base + LOG2 + probit_log_factor(-np.abs(manifold_defect(x, y)), tau)


def build_constraint_sequence(
    base_log_density: Callable[[np.ndarray], np.ndarray],
    constraint: ProbitConstraint,
    schedule: TauSchedule,
    sampler0,
    names=(),
    discrete=(),
) -> DensitySequence:
    """Stage-t kernel: base log density plus the probit log factors at ``tau_t``."""
    taus = schedule.values

    def log_kernel(theta, t):
        return np.asarray(base_log_density(theta), dtype=float) + constraint.log_factor(theta, taus[t])

    return DensitySequence([{"tau": tau} for tau in taus], log_kernel, sampler0, tuple(names), tuple(discrete))


def manifold_sequence(schedule: TauSchedule) -> DensitySequence:
    """Sequence tightening the standard bivariate normal onto ``x^2 - y^2 = 1``."""

    def base(theta):
        return -0.5 * np.sum(theta * theta, axis=1) - np.log(2.0 * np.pi)

    def margins(theta):
        return -np.abs(manifold_defect(theta[:, 0], theta[:, 1]))

    def sampler0(rng, n):
        return rng.standard_normal((n, 2))

    return build_constraint_sequence(
        base, ProbitConstraint(margins, log_offset=LOG2), schedule, sampler0, ("x", "y"), (False, False)
    )


def manifold_y_density(y):
    """Unnormalised limiting marginal of Y on the hyperbola ``x^2 - y^2 = 1``.

    On the curve ``x = +/- sqrt(1 + y^2)`` the soft-constraint limit puts mass
    ``N(x, y) / |d(x^2 - y^2 - 1)/dx|`` per unit y, i.e.
    ``exp(-y^2) / sqrt(1 + y^2)`` up to a constant.
    """
    y = np.asarray(y, dtype=float)
    return np.exp(-y * y) / np.sqrt(1.0 + y * y)


def flat_band_exceedance(c: float = 1.96) -> float:
    """P(|v| > c) for density proportional to Phi(-|v|): tail ratio of the
    integrated normal CDF, ``(phi(c) - c Phi(-c)) / phi(0)``."""
    from scipy.stats import norm

    return float((norm.pdf(c) - c * norm.cdf(-c)) / norm.pdf(0.0))
