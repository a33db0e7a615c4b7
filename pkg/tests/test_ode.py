import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from scmc.errors import UnstableTrajectoryError
from scmc.ode import (
    N_POP,
    RelaxStage,
    SIRParams,
    binomial_logpmf,
    build_relax_sequence,
    default_obs_times,
    default_relax_schedule,
    load_deaths_csv,
    nw_smooth,
    relaxed_loglik,
    relaxed_loglik_batch,
    rk4_integrate,
    rk4_solve,
    sample_sir_prior,
    sir_log_prior,
    sir_rhs,
    sir_synthetic_data,
    solve_sir,
    solve_sir_batch,
    validate_relax_schedule,
)

TRUTH = SIRParams(2.5, 0.02, 5)


def test_rhs_examples():
    s = np.array([250.0, 10.0, 1.0])
    np.testing.assert_allclose(sir_rhs(s, 0.5, 0.0), [0.0, -5.0, 5.0])
    np.testing.assert_array_equal(sir_rhs(np.array([250.0, 0.0, 11.0]), 0.5, 0.1), [0.0, 0.0, 0.0])


@given(st.lists(st.floats(0, 300), min_size=3, max_size=3), st.floats(0, 5), st.floats(0, 1))
def test_rhs_conserves(state, a, b):
    d = sir_rhs(np.array(state), a, b)
    assert abs(d.sum()) <= 1e-9 * (1 + np.abs(d).max())


def test_rk4_constant():
    out, ok = rk4_integrate(lambda t, x: np.zeros_like(x), np.array([1.0, 2.0]), np.linspace(0, 3, 7), 0.1)
    assert ok
    np.testing.assert_array_equal(out, np.tile([1.0, 2.0], (7, 1)))


def test_rk4_exponential():
    out = rk4_solve(lambda t, x: -x, np.array([1.0]), np.array([0.0, 1.0]), 0.01)
    assert abs(out[-1, 0] - np.exp(-1.0)) < 1e-8


def test_rk4_fourth_order():
    errs = []
    for h in (0.1, 0.05):
        out = rk4_solve(lambda t, x: -x, np.array([1.0]), np.array([0.0, 1.0]), h)
        errs.append(abs(out[-1, 0] - np.exp(-1.0)))
    assert 12 < errs[0] / errs[1] < 20


def test_rk4_interpolates_between_steps():
    out = rk4_solve(lambda t, x: np.ones_like(x), np.array([0.0]), np.array([0.0, 0.25, 1.0]), 0.1)
    np.testing.assert_allclose(out[:, 0], [0.0, 0.25, 1.0], atol=1e-12)


def test_rk4_blowup_error_carries_theta():
    with pytest.raises(UnstableTrajectoryError, match="unstable trajectory") as err:
        rk4_solve(lambda t, x: x * x, np.array([10.0]), np.array([0.0, 5.0]), 0.1, theta="th")
    assert err.value.theta == "th"
    with pytest.raises(UnstableTrajectoryError):
        solve_sir(SIRParams(1.0, 1.0, 5), default_obs_times())


def test_rk4_preconditions():
    with pytest.raises(ValueError):
        rk4_integrate(lambda t, x: x, np.array([1.0]), np.array([0.0, 1.0]), 0.0)
    with pytest.raises(ValueError):
        rk4_integrate(lambda t, x: x, np.array([1.0]), np.array([1.0, 0.0]), 0.1)


def test_conservation_along_solve():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = SIRParams(rng.uniform(0.5, 4), rng.uniform(0.001, 0.04), int(rng.integers(1, 20)))
        s = solve_sir(p, default_obs_times())
        tot = s.S + s.I + s.R
        assert np.all(np.abs(tot - N_POP) < 1e-6)
        assert min(s.S.min(), s.I.min(), s.R.min()) >= -1e-9


def test_batch_solver_matches_reference():
    rng = np.random.default_rng(1)
    theta = sample_sir_prior(rng, 300)
    theta[:100, 1] *= 0.02
    t = default_obs_times()
    R, ok = solve_sir_batch(theta, t)
    grid = np.concatenate([[0.0], t])
    x0 = np.column_stack([N_POP - theta[:, 2], theta[:, 2], np.zeros(300)])
    ref, ok_ref = rk4_integrate(lambda _t, x: _rhs_batch(x, theta), x0, grid, 0.1)
    np.testing.assert_array_equal(ok, ok_ref)
    assert ok.sum() > 50
    np.testing.assert_allclose(R[ok], ref[1:, ok, 2].T, rtol=1e-10, atol=1e-9)


def _rhs_batch(x, theta):
    S, I = x[:, 0], x[:, 1]
    inf = theta[:, 1] * S * I
    rem = theta[:, 0] * I
    return np.column_stack([-inf, inf - rem, rem])


def test_nw_constant_residuals():
    t = np.arange(1.0, 11.0)
    for b in (0.5, 2.0, 50.0):
        np.testing.assert_allclose(nw_smooth(t, np.full(10, 3.3), b), 3.3)


def test_nw_wide_bandwidth_is_mean():
    t = np.arange(1.0, 31.0)
    r = np.random.default_rng(2).normal(size=30)
    np.testing.assert_allclose(nw_smooth(t, r, 1e6), r.mean(), atol=1e-9)


def test_nw_zero_bandwidth_interpolates():
    t = np.arange(1.0, 31.0)
    r = np.random.default_rng(3).normal(size=30)
    np.testing.assert_array_equal(nw_smooth(t, r, 0.0), r)
    np.testing.assert_allclose(nw_smooth(t, r, 1e-3), r, atol=1e-12)
    with pytest.raises(ValueError, match="interpolation bandwidth off-grid"):
        nw_smooth(t, r, 0.0, t_eval=np.array([1.5]))


def test_nw_kernel_arithmetic():
    e = nw_smooth(np.array([0.0, 1.0]), np.array([0.0, 1.0]), 1.0, t_eval=np.array([0.0]))
    expected = stats.norm.pdf(1) / (stats.norm.pdf(0) + stats.norm.pdf(1))
    assert e[0] == pytest.approx(expected, rel=1e-12)
    assert e[0] == pytest.approx(0.3775, abs=1e-4)


def _reference_binomial_ll(R, y):
    p = np.clip(R / N_POP, 1e-9, 1 - 1e-9)
    return sum(stats.binom.logpmf(int(yi), N_POP, pi) for yi, pi in zip(y, p))


def test_xi_zero_is_plain_likelihood():
    t = default_obs_times()
    y = sir_synthetic_data(TRUTH, t, np.random.default_rng(4))
    p = SIRParams(2.2, 0.021, 6)
    R = solve_sir(p, t).R
    assert relaxed_loglik(p, 5.0, 0.0, y, t) == pytest.approx(_reference_binomial_ll(R, y), rel=1e-10)
    terms = binomial_logpmf(y, N_POP, np.clip(R / N_POP, 1e-9, 1 - 1e-9))
    ref = stats.binom.logpmf(y.astype(int), N_POP, np.clip(R / N_POP, 1e-9, 1 - 1e-9))
    np.testing.assert_allclose(terms, ref, rtol=1e-9, atol=1e-9)


def test_xi_zero_independent_of_b_bitwise():
    t = default_obs_times()
    y = sir_synthetic_data(TRUTH, t, np.random.default_rng(5))
    theta = sample_sir_prior(np.random.default_rng(6), 200)
    theta[:, 1] *= 0.03
    a = relaxed_loglik_batch(theta, 2.0, 0.0, y, t)
    b = relaxed_loglik_batch(theta, 26.0, 0.0, y, t)
    assert a.tobytes() == b.tobytes()
    p = SIRParams(2.4, 0.019, 5)
    assert relaxed_loglik(p, 2.0, 0.0, y, t) == relaxed_loglik(p, 26.0, 0.0, y, t)


def test_interpolating_limit_is_constant_in_theta():
    t = default_obs_times()
    y = sir_synthetic_data(TRUTH, t, np.random.default_rng(7))
    p = np.clip(y / N_POP, 1e-9, 1 - 1e-9)
    expected = np.sum(binomial_logpmf(y, N_POP, p))
    for th in (SIRParams(0.3, 0.001, 1), SIRParams(3.0, 0.03, 9)):
        assert relaxed_loglik(th, 0.0, 1.0, y, t) == pytest.approx(expected)
        # a tiny positive bandwidth runs the full path and agrees
        assert relaxed_loglik(th, 1e-3, 1.0, y, t) == pytest.approx(expected, rel=1e-9)


def test_truth_maximises_on_coarse_grid():
    t = default_obs_times()
    y = np.round(solve_sir(TRUTH, t).R)
    best = None
    for fa, fb, i0 in itertools.product((0.9, 1.0, 1.1), (0.9, 1.0, 1.1), (4, 5, 6)):
        p = SIRParams(TRUTH.alpha * fa, TRUTH.beta * fb, i0)
        ll = relaxed_loglik(p, 26.0, 0.0, y, t)
        if best is None or ll > best[0]:
            best = (ll, fa, fb, i0)
    assert best[1:] == (1.0, 1.0, 5)


def test_synthetic_data_examples():
    t = default_obs_times()
    assert np.all(sir_synthetic_data(SIRParams(1.0, 0.0, 0), t, np.random.default_rng(8)) == 0)
    # without transmission only the initial infected are removed
    s = solve_sir(SIRParams(0.7, 0.0, 5), t)
    np.testing.assert_allclose(s.R, 5 * (1 - np.exp(-0.7 * t)), rtol=1e-6)
    y = sir_synthetic_data(SIRParams(3.0, 0.05, 10), t, np.random.default_rng(9))
    final = solve_sir(SIRParams(3.0, 0.05, 10), t).R[-1]
    assert abs(y[-20:].mean() - final) < 3 * np.sqrt(final)


def test_synthetic_data_binomial_moment():
    t = default_obs_times()
    R = solve_sir(TRUTH, t).R
    draws = sir_synthetic_data(TRUTH, t, np.random.default_rng(10), size=10000)
    assert draws.shape == (10000, t.size)
    for i in (10, 40, 100):
        p = R[i] / N_POP
        sigma = np.sqrt(N_POP * p * (1 - p) / draws.shape[0])
        assert abs(draws[:, i].mean() - R[i]) < 3 * sigma


def test_prior():
    th = np.array([[1.0, 0.5, 5.0], [1.0, 0.5, 5.5], [-1.0, 0.5, 5.0], [1.0, 0.5, 262.0]])
    lp = sir_log_prior(th)
    expected = stats.gamma(1).logpdf(1.0) + stats.gamma(1).logpdf(0.5) + stats.binom(N_POP, 5 / N_POP).logpmf(5)
    assert lp[0] == pytest.approx(expected)
    assert np.all(lp[1:] == -np.inf)


def test_params_validation():
    with pytest.raises(ValueError):
        SIRParams(-1.0, 0.1, 5)
    with pytest.raises(ValueError):
        SIRParams(1.0, 0.1, 300)
    np.testing.assert_array_equal(TRUTH.initial_state(), [256.0, 5.0, 0.0])


def test_default_schedule():
    s = default_relax_schedule()
    assert len(s) == 50
    assert s[0] == RelaxStage(2.0, 1.0) and s[24] == RelaxStage(26.0, 1.0)
    assert s[-1] == RelaxStage(26.0, 0.0)
    bs = [x.b for x in s[:25]]
    assert 12.0 in bs
    validate_relax_schedule(s)


@pytest.mark.parametrize(
    "bad",
    [
        [RelaxStage(2.0, 1.0), RelaxStage(1.0, 1.0), RelaxStage(1.0, 0.0)],
        [RelaxStage(2.0, 1.0), RelaxStage(3.0, 0.5), RelaxStage(3.0, 0.7), RelaxStage(3.0, 0.0)],
        [RelaxStage(2.0, 1.0), RelaxStage(3.0, 0.5)],
        [RelaxStage(2.0, 1.0), RelaxStage(3.0, 0.5), RelaxStage(4.0, 0.0)],
        [],
    ],
)
def test_malformed_schedules(bad):
    with pytest.raises(ValueError):
        validate_relax_schedule(bad)


def test_relax_sequence_kernel():
    t = default_obs_times()
    y = sir_synthetic_data(TRUTH, t, np.random.default_rng(11))
    seq = build_relax_sequence(default_relax_schedule(), y, t)
    assert seq.T == 50
    assert seq.stages[0] == {"b": 0.0, "xi": 1.0}
    theta = np.array([[2.3, 0.021, 5.0], [2.3, 0.021, -1.0]])
    k = seq.log_kernel(theta, 7)
    st = seq.stages[7]
    expected = sir_log_prior(theta[:1])[0] + relaxed_loglik(SIRParams(2.3, 0.021, 5), st["b"], st["xi"], y, t)
    assert k[0] == pytest.approx(expected, rel=1e-10)
    assert k[1] == -np.inf
    k0 = seq.log_kernel(theta[:1], 0)
    assert k0[0] == pytest.approx(sir_log_prior(theta[:1])[0] + relaxed_loglik(SIRParams(2.3, 0.021, 5), 0.0, 1.0, y, t))


def test_load_deaths_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("day,cumulative_deaths\n1,0\n2,1\n3,4\n")
    days, deaths = load_deaths_csv(p)
    np.testing.assert_array_equal(days, [1, 2, 3])
    np.testing.assert_array_equal(deaths, [0, 1, 4])


@pytest.mark.xfail(
    strict=True,
    reason="prior draws with fast outbreaks blow up under fixed-step RK4 and the b=2 smooth "
    "already separates the remaining particles; measured first-update ESS is far below 0.9N",
)
def test_first_update_ess_above_ninety_percent():
    from scmc.particles import ess, log_normalize

    t = default_obs_times()
    y = sir_synthetic_data(TRUTH, t, np.random.default_rng(12))
    seq = build_relax_sequence(default_relax_schedule(), y, t)
    theta = seq.sampler0(np.random.default_rng(13), 2000)
    inc = seq.log_kernel(theta, 1) - seq.log_kernel(theta, 0)
    assert ess(log_normalize(inc)) > 0.9 * 2000
