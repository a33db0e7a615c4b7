"""SIR posterior under a relaxed (kernel-smoothed) ODE likelihood.

The fitted death curve is ``R(theta) + xi * e`` where ``e`` is the
Nadaraya-Watson smooth of the residuals ``y - R(theta)`` with bandwidth b.
The sequence first widens b with xi = 1, then shrinks xi to 0, which
recovers the plain binomial ODE likelihood.  Parameters are
``theta = (alpha, beta, I0)`` with I0 an integer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.special import gammaln, xlog1py, xlogy

from .engine import DensitySequence
from .errors import UnstableTrajectoryError

N_POP = 261
P_CLAMP = 1e-9
BLOWUP = 1e12
PARAM_NAMES = ("alpha", "beta", "I0")


@dataclass(frozen=True)
class SIRParams:
    alpha: float
    beta: float
    I0: int
    N_pop: int = N_POP

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if int(self.I0) != self.I0 or not 0 <= self.I0 <= self.N_pop:
            raise ValueError(f"I0 must be an integer in [0, {self.N_pop}]")

    def as_array(self):
        return np.array([self.alpha, self.beta, float(self.I0)])

    def initial_state(self):
        return np.array([self.N_pop - self.I0, self.I0, 0.0], dtype=float)


@dataclass(frozen=True)
class RelaxStage:
    b: float
    xi: float


@dataclass
class SolvedStates:
    t: np.ndarray
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray


def sir_rhs(state, alpha, beta):
    """Right-hand side ``(-b S I, b S I - a I, a I)`` on the last axis of ``state``."""
    state = np.asarray(state, dtype=float)
    S, I = state[..., 0], state[..., 1]
    infect = beta * S * I
    removal = alpha * I
    return np.stack([-infect, infect - removal, removal], axis=-1)


def rk4_integrate(rhs: Callable, x0, t_grid, h: float):
    """Classical fixed-step RK4 from ``t_grid[0]``, linearly interpolated onto ``t_grid``.

    ``rhs(t, x)`` acts on arrays of shape ``(..., k)``.  Returns
    ``(states, stable)`` with states of shape ``(len(t_grid), ..., k)``;
    ``stable`` flags batch members that never exceeded the blow-up bound.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing")
    x = np.array(x0, dtype=float)
    t0 = t_grid[0]
    n_steps = int(np.ceil((t_grid[-1] - t0) / h - 1e-9))
    # positions of the grid points in units of steps
    pos = (t_grid - t0) / h
    lo = np.minimum(np.floor(pos + 1e-9).astype(int), n_steps)
    frac = np.clip(pos - lo, 0.0, 1.0)
    needed = np.zeros(n_steps + 2, dtype=bool)
    needed[lo] = True
    needed[np.minimum(lo + 1, n_steps)] = True
    kept = {}
    stable = np.ones(x.shape[:-1], dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps + 1):
            if needed[k]:
                kept[k] = x.copy()
            if k == n_steps:
                break
            t = t0 + k * h
            k1 = rhs(t, x)
            k2 = rhs(t + 0.5 * h, x + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, x + 0.5 * h * k2)
            k4 = rhs(t + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = ~np.all(np.isfinite(x) & (np.abs(x) <= BLOWUP), axis=-1)
            if bad.any():
                stable &= ~bad
                x[bad] = np.nan
    out = np.empty((t_grid.size,) + x.shape)
    for i, (l, f) in enumerate(zip(lo, frac)):
        a = kept[l]
        if f == 0.0:
            out[i] = a
        else:
            out[i] = (1.0 - f) * a + f * kept[min(l + 1, n_steps)]
    return out, stable


def rk4_solve(rhs: Callable, x0, t_grid, h: float, theta=None) -> np.ndarray:
    """Like :func:`rk4_integrate` but raises if the trajectory blows up."""
    states, stable = rk4_integrate(rhs, x0, t_grid, h)
    if not np.all(stable):
        raise UnstableTrajectoryError(f"unstable trajectory (theta={theta})", theta)
    return states


def _from_zero(t_grid):
    """Grid starting at the initial-condition time 0, and the offset of ``t_grid`` in it."""
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] < 0:
        raise ValueError("observation times must be non-negative")
    if t_grid[0] == 0:
        return t_grid, 0
    return np.concatenate([[0.0], t_grid]), 1


def solve_sir(params: SIRParams, t_grid, h: float = 0.1) -> SolvedStates:
    """Solve from the initial state at time 0 and report on ``t_grid``."""
    grid, off = _from_zero(t_grid)
    rhs = lambda t, x: sir_rhs(x, params.alpha, params.beta)  # noqa: E731
    states = rk4_solve(rhs, params.initial_state(), grid, h, theta=params)[off:]
    return SolvedStates(grid[off:], states[:, 0], states[:, 1], states[:, 2])


@numba.njit(cache=True, nogil=True)
def _sir_removed_rk4(alpha, beta, I0, N_pop, t_grid, h, blowup):
    n = alpha.size
    m = t_grid.size
    n_steps = int(np.ceil((t_grid[m - 1] - t_grid[0]) / h - 1e-9))
    R_out = np.empty((n, m))
    stable = np.ones(n, dtype=np.bool_)
    for p in range(n):
        a = alpha[p]
        b = beta[p]
        S = N_pop - I0[p]
        I = I0[p]
        R = 0.0
        j = 0
        prev_R = R
        for k in range(n_steps + 1):
            t = t_grid[0] + k * h
            # grid points in [t - h, t] interpolate between prev_R and R
            while j < m and t_grid[j] <= t + 1e-9 * h:
                if k == 0:
                    R_out[p, j] = R
                else:
                    f = (t_grid[j] - (t - h)) / h
                    if f >= 1.0:
                        R_out[p, j] = R
                    else:
                        R_out[p, j] = (1.0 - f) * prev_R + f * R
                j += 1
            if k == n_steps:
                break
            s1 = -b * S * I
            i1 = b * S * I - a * I
            r1 = a * I
            S2 = S + 0.5 * h * s1
            I2 = I + 0.5 * h * i1
            s2 = -b * S2 * I2
            i2 = b * S2 * I2 - a * I2
            r2 = a * I2
            S3 = S + 0.5 * h * s2
            I3 = I + 0.5 * h * i2
            s3 = -b * S3 * I3
            i3 = b * S3 * I3 - a * I3
            r3 = a * I3
            S4 = S + h * s3
            I4 = I + h * i3
            s4 = -b * S4 * I4
            i4 = b * S4 * I4 - a * I4
            r4 = a * I4
            prev_R = R
            S = S + (h / 6.0) * (s1 + 2.0 * s2 + 2.0 * s3 + s4)
            I = I + (h / 6.0) * (i1 + 2.0 * i2 + 2.0 * i3 + i4)
            R = R + (h / 6.0) * (r1 + 2.0 * r2 + 2.0 * r3 + r4)
            if not (abs(S) <= blowup and abs(I) <= blowup and abs(R) <= blowup):
                stable[p] = False
                break
        if not stable[p]:
            for q in range(m):
                R_out[p, q] = np.nan
    return R_out, stable


def solve_sir_batch(theta, t_grid, h: float = 0.1, N_pop: int = N_POP):
    """Removed-compartment curves for a batch ``(n, 3)`` of (alpha, beta, I0).

    Same RK4 scheme as :func:`rk4_integrate`, compiled per particle.
    Returns ``(R, stable)`` with ``R`` of shape ``(n, len(t_grid))``.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    grid, off = _from_zero(t_grid)
    R, stable = _sir_removed_rk4(
        np.ascontiguousarray(theta[:, 0]),
        np.ascontiguousarray(theta[:, 1]),
        np.ascontiguousarray(theta[:, 2]),
        float(N_pop),
        grid,
        float(h),
        BLOWUP,
    )
    return R[:, off:], stable


def nw_weights(t_obs, b: float, t_eval) -> np.ndarray:
    t_obs = np.asarray(t_obs, dtype=float)
    t_eval = np.asarray(t_eval, dtype=float)
    if b < 0:
        raise ValueError("bandwidth must be non-negative")
    if b == 0:
        W = (t_eval[:, None] == t_obs[None, :]).astype(float)
        if np.any(W.sum(axis=1) == 0):
            raise ValueError("interpolation bandwidth off-grid")
        return W / W.sum(axis=1, keepdims=True)
    z = -0.5 * ((t_eval[:, None] - t_obs[None, :]) / b) ** 2
    z -= z.max(axis=1, keepdims=True)
    W = np.exp(z)
    return W / W.sum(axis=1, keepdims=True)


def nw_smooth(t_obs, residuals, b: float, t_eval=None) -> np.ndarray:
    """Gaussian-kernel Nadaraya-Watson smooth of ``residuals`` (last axis) at ``t_eval``."""
    t_eval = t_obs if t_eval is None else t_eval
    W = nw_weights(t_obs, b, t_eval)
    return np.asarray(residuals, dtype=float) @ W.T


def binomial_logpmf(y, n, p):
    y = np.asarray(y, dtype=float)
    return gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1) + xlogy(y, p) + xlog1py(n - y, -p)


def _relaxed_from_R(R, y, t_obs, b, xi, N_pop):
    if xi == 0:
        fitted = R
    else:
        fitted = R + xi * nw_smooth(t_obs, y - R, b)
    p = np.clip(fitted / N_pop, P_CLAMP, 1.0 - P_CLAMP)
    return np.sum(binomial_logpmf(y, N_pop, p), axis=-1)


def relaxed_loglik(params: SIRParams, b: float, xi: float, y, t_obs, h: float = 0.1) -> float:
    """Binomial log likelihood of cumulative deaths ``y`` under the relaxed fit."""
    y = np.asarray(y, dtype=float)
    if b == 0 and xi == 1:
        p = np.clip(y / params.N_pop, P_CLAMP, 1.0 - P_CLAMP)
        return float(np.sum(binomial_logpmf(y, params.N_pop, p)))
    R = solve_sir(params, t_obs, h).R
    return float(_relaxed_from_R(R, y, t_obs, b, xi, params.N_pop))


def relaxed_loglik_batch(theta, b, xi, y, t_obs, h: float = 0.1, N_pop: int = N_POP) -> np.ndarray:
    """Vectorised :func:`relaxed_loglik`; unstable solves get ``-inf``."""
    theta = np.atleast_2d(theta)
    y = np.asarray(y, dtype=float)
    if b == 0 and xi == 1:
        p = np.clip(y / N_pop, P_CLAMP, 1.0 - P_CLAMP)
        return np.full(theta.shape[0], np.sum(binomial_logpmf(y, N_pop, p)))
    R, stable = solve_sir_batch(theta, t_obs, h, N_pop)
    R = np.where(stable[:, None], R, 0.0)
    ll = _relaxed_from_R(R, y[None, :], t_obs, b, xi, N_pop)
    return np.where(stable, ll, -np.inf)


def sir_log_prior(theta, N_pop: int = N_POP, i0_mean: float = 5.0) -> np.ndarray:
    """alpha, beta ~ Gamma(1, 1); I0 ~ Binomial(N_pop, i0_mean / N_pop)."""
    theta = np.atleast_2d(theta)
    a, b, i0 = theta[:, 0], theta[:, 1], theta[:, 2]
    q = i0_mean / N_pop
    ok = (a > 0) & (b > 0) & (i0 >= 0) & (i0 <= N_pop) & (np.floor(i0) == i0)
    i0c = np.clip(i0, 0, N_pop)
    lp = -a - b + binomial_logpmf(i0c, N_pop, q)
    return np.where(ok, lp, -np.inf)


def sample_sir_prior(rng, n, N_pop: int = N_POP, i0_mean: float = 5.0):
    return np.column_stack(
        [rng.gamma(1.0, 1.0, n), rng.gamma(1.0, 1.0, n), rng.binomial(N_pop, i0_mean / N_pop, n).astype(float)]
    )


def validate_relax_schedule(stages: Sequence[RelaxStage]):
    """Check ``b`` rises with ``xi = 1`` and then ``xi`` falls to 0 at fixed ``b``."""
    if not stages:
        raise ValueError("relaxation schedule is empty")
    b = np.array([s.b for s in stages], dtype=float)
    xi = np.array([s.xi for s in stages], dtype=float)
    if np.any(b <= 0) or np.any((xi < 0) | (xi > 1)):
        raise ValueError("need b > 0 and xi in [0, 1]")
    if xi[-1] != 0:
        raise ValueError("schedule must end at xi = 0")
    ones = np.flatnonzero(xi == 1.0)
    t_star = ones[-1] if ones.size else -1
    if ones.size and not np.array_equal(ones, np.arange(t_star + 1)):
        raise ValueError("xi must stay at 1 until it starts decreasing")
    if np.any(np.diff(b[: t_star + 1]) <= 0):
        raise ValueError("b must increase strictly while xi = 1")
    tail_b = b[max(t_star, 0):]
    if np.any(tail_b != tail_b[0]):
        raise ValueError("b must stay fixed while xi decreases")
    if np.any(np.diff(xi[t_star + 1 :]) >= 0) or (t_star + 1 < xi.size and xi[t_star + 1] >= 1):
        raise ValueError("xi must decrease strictly after the bandwidth phase")


def default_relax_schedule(b_start=2.0, b_end=26.0, n_b=25, n_xi=25) -> list:
    """``n_b`` linear bandwidths at xi = 1, then ``n_xi`` linear xi steps down to 0."""
    bs = np.linspace(b_start, b_end, n_b)
    xis = np.linspace(1.0, 0.0, n_xi + 1)[1:]
    return [RelaxStage(float(b), 1.0) for b in bs] + [RelaxStage(float(bs[-1]), float(x)) for x in xis]


def build_relax_sequence(
    stages: Sequence[RelaxStage],
    y,
    t_obs,
    h: float = 0.1,
    N_pop: int = N_POP,
    i0_mean: float = 5.0,
) -> DensitySequence:
    """Stage 0 is the prior (b = 0, xi = 1 interpolates the data exactly);
    stage t >= 1 uses ``stages[t - 1]``."""
    stages = list(stages)
    validate_relax_schedule(stages)
    full = [RelaxStage(0.0, 1.0)] + stages
    y = np.asarray(y, dtype=float)
    t_obs = np.asarray(t_obs, dtype=float)

    def log_kernel(theta, t):
        lp = sir_log_prior(theta, N_pop, i0_mean)
        ok = np.isfinite(lp)
        out = np.full(theta.shape[0], -np.inf)
        if ok.any():
            st = full[t]
            out[ok] = lp[ok] + relaxed_loglik_batch(theta[ok], st.b, st.xi, y, t_obs, h, N_pop)
        return out

    def sampler0(rng, n):
        return sample_sir_prior(rng, n, N_pop, i0_mean)

    return DensitySequence(
        [{"b": s.b, "xi": s.xi} for s in full], log_kernel, sampler0, PARAM_NAMES, (False, False, True)
    )


def sir_synthetic_data(params: SIRParams, t_obs, rng, h: float = 0.1, size=None):
    """Binomial cumulative-death counts around the ODE solution.

    With ``size`` the result has shape ``(size, len(t_obs))`` of independent
    replicates sharing one solve.
    """
    R = solve_sir(params, t_obs, h).R
    p = np.clip(R / params.N_pop, 0.0, 1.0)
    shape = p.shape if size is None else (size,) + p.shape
    return rng.binomial(params.N_pop, np.broadcast_to(p, shape))


def default_obs_times(n: int = 136):
    return np.arange(1.0, n + 1.0)


def load_deaths_csv(path):
    """Read a ``day,cumulative_deaths`` CSV (header row optional)."""
    days, deaths = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                d, c = float(row[0]), float(row[1])
            except ValueError:
                if days:
                    raise
                continue
            days.append(d)
            deaths.append(c)
    return np.array(days), np.array(deaths)
