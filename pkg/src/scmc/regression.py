"""Monotone polynomial regression under a probit derivative constraint.

Parameters are ``theta = (beta_0, ..., beta_p, sigma2)``.  Stage 0 is the
conjugate normal-inverse-gamma posterior, sampled exactly; later stages
multiply it by ``prod_i Phi(tau * f'(x_i))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .constraints import ProbitConstraint, TauSchedule, build_constraint_sequence, probit_log_factor
from .engine import DensitySequence
from .errors import NumericalError
from .particles import weighted_quantile

TOY_FUNCTIONS = {
    "f1": lambda x: 0.1 + 0.3 * x**3 + 0.5 * x**5 + 0.7 * x**7 + 0.9 * x**9,
    "f2": lambda x: np.log(20.0 * x + 1.0),
    "f3": lambda x: 2.0 / (1.0 + np.exp(-10.0 * x + 5.0)),
}


def vandermonde(x, p):
    x = np.asarray(x, dtype=float)
    return x[:, None] ** np.arange(p + 1)


def vandermonde_derivative(x, p):
    x = np.asarray(x, dtype=float)
    k = np.arange(p + 1)
    out = np.zeros((x.size, p + 1))
    out[:, 1:] = k[1:] * x[:, None] ** (k[1:] - 1)
    return out


@dataclass(frozen=True)
class PolyModel:
    order: int
    x: np.ndarray
    X: np.ndarray
    D: np.ndarray

    @property
    def n(self):
        return self.x.size


def make_poly_model(x, p: int) -> PolyModel:
    x = np.asarray(x, dtype=float)
    if p < 1:
        raise ValueError("polynomial order must be positive")
    if np.any((x < 0) | (x > 1)):
        raise ValueError("design points must lie in [0, 1]")
    if x.size < p + 1:
        raise ValueError(f"need at least {p + 1} design points for order {p}")
    X = vandermonde(x, p)
    if np.linalg.matrix_rank(X) < p + 1:
        raise NumericalError("singular design")
    return PolyModel(p, x, X, vandermonde_derivative(x, p))


@dataclass(frozen=True)
class NIGHyper:
    m0: np.ndarray
    V0: np.ndarray
    a0: float = 1.0
    b0: float = 1.0

    @classmethod
    def default(cls, p: int, v0: float = 100.0) -> "NIGHyper":
        return cls(np.zeros(p + 1), v0 * np.eye(p + 1), 1.0, 1.0)

    def __post_init__(self):
        if self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("a0 and b0 must be positive")
        V0 = np.asarray(self.V0, dtype=float)
        if not np.allclose(V0, V0.T):
            raise ValueError("V0 must be symmetric")


@dataclass(frozen=True)
class NIGPosterior:
    mean: np.ndarray
    V: np.ndarray
    a: float
    b: float
    chol: np.ndarray = field(repr=False)

    @property
    def beta_cov(self) -> np.ndarray:
        """Marginal covariance of beta (multivariate t), needs ``a > 1``."""
        return self.b / (self.a - 1.0) * self.V

    @property
    def sigma2_mean(self) -> float:
        return self.b / (self.a - 1.0)


def nig_posterior(model: PolyModel, y, hyper: NIGHyper) -> NIGPosterior:
    y = np.asarray(y, dtype=float)
    X = model.X
    P0 = np.linalg.inv(hyper.V0)
    Pn = P0 + X.T @ X
    try:
        Ln = np.linalg.cholesky(Pn)
        Vn = np.linalg.inv(Pn)
        Vn = 0.5 * (Vn + Vn.T)
        chol = np.linalg.cholesky(Vn)
    except np.linalg.LinAlgError:
        raise NumericalError(
            f"posterior covariance not positive definite (condition number {np.linalg.cond(Pn):.3e})"
        ) from None
    mn = np.linalg.solve(Ln.T, np.linalg.solve(Ln, P0 @ hyper.m0 + X.T @ y))
    an = hyper.a0 + 0.5 * y.size
    bn = hyper.b0 + 0.5 * (y @ y + hyper.m0 @ P0 @ hyper.m0 - mn @ Pn @ mn)
    if bn <= 0:
        bn = hyper.b0 + 0.5 * float(np.sum((y - X @ mn) ** 2) + (mn - hyper.m0) @ P0 @ (mn - hyper.m0))
    return NIGPosterior(mn, Vn, an, float(bn), chol)


def nig_posterior_sample(model, y, hyper, rng, size: int = 1):
    """Exact draws ``(beta (size, p+1), sigma2 (size,))`` from the conjugate posterior."""
    post = nig_posterior(model, y, hyper)
    sigma2 = post.b / rng.gamma(post.a, 1.0, size=size)
    z = rng.standard_normal((size, post.mean.size))
    beta = post.mean + np.sqrt(sigma2)[:, None] * (z @ post.chol.T)
    return beta, sigma2


def nig_log_prior(beta, sigma2, hyper: NIGHyper):
    beta = np.atleast_2d(beta)
    sigma2 = np.asarray(sigma2, dtype=float)
    k = beta.shape[1]
    P0 = np.linalg.inv(hyper.V0)
    _, logdet = np.linalg.slogdet(hyper.V0)
    r = beta - hyper.m0
    quad = np.einsum("ij,jk,ik->i", r, P0, r)
    with np.errstate(divide="ignore", invalid="ignore"):
        ls = np.log(sigma2)
        lp = (
            -0.5 * k * (np.log(2 * np.pi) + ls)
            - 0.5 * logdet
            - 0.5 * quad / sigma2
            + hyper.a0 * np.log(hyper.b0)
            - gammaln(hyper.a0)
            - (hyper.a0 + 1.0) * ls
            - hyper.b0 / sigma2
        )
    return np.where(sigma2 > 0, lp, -np.inf)


def gaussian_loglik(model, y, beta, sigma2):
    beta = np.atleast_2d(beta)
    sigma2 = np.asarray(sigma2, dtype=float)
    resid = np.asarray(y, dtype=float)[None, :] - beta @ model.X.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = -0.5 * model.n * np.log(2 * np.pi * sigma2) - 0.5 * np.sum(resid**2, axis=1) / sigma2
    return np.where(sigma2 > 0, ll, -np.inf)


def monotone_log_kernel(model, y, beta, sigma2, tau, hyper=None):
    """Log prior + Gaussian log likelihood + ``sum_i log Phi(tau * (D beta)_i)``.

    ``beta`` may be a single vector or an ``(n, p+1)`` batch.
    """
    single = np.ndim(beta) == 1
    beta = np.atleast_2d(beta)
    hyper = hyper or NIGHyper.default(model.order)
    out = (
        nig_log_prior(beta, sigma2, hyper)
        + gaussian_loglik(model, y, beta, sigma2)
        + np.sum(probit_log_factor(beta @ model.D.T, tau), axis=1)
    )
    return float(out[0]) if single else out


def generate_toy_data(kind: str, n: int = 30, sigma_noise: float = 0.1, rng=None):
    """Equispaced grid on [0, 1] and noisy observations of a monotone toy function."""
    if kind not in TOY_FUNCTIONS:
        raise ValueError(f"unknown toy function {kind!r}")
    if sigma_noise < 0:
        raise ValueError("sigma_noise must be non-negative")
    x = np.linspace(0.0, 1.0, n)
    y = TOY_FUNCTIONS[kind](x)
    if sigma_noise > 0:
        y = y + sigma_noise * (rng or np.random.default_rng()).standard_normal(n)
    return x, y


def monotone_sequence(
    model: PolyModel,
    y,
    schedule: TauSchedule,
    hyper: NIGHyper | None = None,
    constraint_x=None,
) -> DensitySequence:
    """Density sequence for the monotone fit.

    ``constraint_x`` sets where positivity of the derivative is enforced
    (defaults to the design points).
    """
    hyper = hyper or NIGHyper.default(model.order)
    y = np.asarray(y, dtype=float)
    p = model.order
    Dc = model.D if constraint_x is None else vandermonde_derivative(constraint_x, p)
    post = nig_posterior(model, y, hyper)

    def base(theta):
        beta, s2 = theta[:, :-1], theta[:, -1]
        return nig_log_prior(beta, s2, hyper) + gaussian_loglik(model, y, beta, s2)

    def margins(theta):
        return theta[:, :-1] @ Dc.T

    def sampler0(rng, n):
        sigma2 = post.b / rng.gamma(post.a, 1.0, size=n)
        z = rng.standard_normal((n, p + 1))
        beta = post.mean + np.sqrt(sigma2)[:, None] * (z @ post.chol.T)
        return np.column_stack([beta, sigma2])

    names = tuple(f"beta{k}" for k in range(p + 1)) + ("sigma2",)
    return build_constraint_sequence(
        base, ProbitConstraint(margins), schedule, sampler0, names, (False,) * (p + 2)
    )


def posterior_bands(beta, weights, grid, level: float = 0.95):
    """Weighted mean and pointwise central credible band of ``X(grid) beta``.

    Returns ``(mean, lower, upper)`` arrays over ``grid``.
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    w = np.asarray(weights, dtype=float)
    if beta.shape[0] < 100:
        raise ValueError("need at least 100 draws for credible bands")
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    w = w / w.sum()
    curves = beta @ vandermonde(grid, beta.shape[1] - 1).T
    mean = w @ curves
    lo = weighted_quantile(curves, w, 0.5 - level / 2)
    hi = weighted_quantile(curves, w, 0.5 + level / 2)
    return mean, lo, hi


def min_derivative(beta, x):
    beta = np.atleast_2d(beta)
    return np.min(beta @ vandermonde_derivative(x, beta.shape[1] - 1).T, axis=1)
