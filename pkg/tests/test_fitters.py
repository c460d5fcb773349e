import numpy as np
import pytest
from scipy.special import expit

from smcimpute.fitters import (
    FitError,
    StepCumHazard,
    breslow_baseline,
    cox_loglik,
    draw_cox_posterior,
    draw_glm_posterior,
    draw_linear_posterior,
    fit_cox,
    fit_linear,
    fit_logistic,
    logistic_loglik,
    nelson_aalen,
)

rng0 = np.random.default_rng  # shorthand


# ---------------------------------------------------------------------------
# linear regression

def test_linear_perfect_fit():
    X = np.column_stack([np.ones(3), [0.0, 1.0, 2.0]])
    fit = fit_linear(X, np.array([0.0, 1.0, 2.0]))
    np.testing.assert_allclose(fit.beta, [0.0, 1.0], atol=1e-12)
    assert fit.sigma2 == pytest.approx(0.0, abs=1e-24)


def test_linear_intercept_only_constant():
    fit = fit_linear(np.ones((4, 1)), np.full(4, 3.7))
    assert fit.beta[0] == pytest.approx(3.7)


def test_linear_hand_computed_normal_equations():
    # points (0,1), (1,3), (2,4): closed form gives (7/6, 3/2)
    X = np.column_stack([np.ones(3), [0.0, 1.0, 2.0]])
    fit = fit_linear(X, np.array([1.0, 3.0, 4.0]))
    np.testing.assert_allclose(fit.beta, [7.0 / 6.0, 1.5], atol=1e-12)


def test_linear_rank_deficient():
    X = np.column_stack([np.ones(5), np.ones(5)])
    with pytest.raises(FitError):
        fit_linear(X, np.zeros(5))


def test_linear_needs_more_rows_than_columns():
    with pytest.raises(FitError):
        fit_linear(np.ones((2, 2)), np.zeros(2))


def test_linear_residuals_orthogonal_to_design():
    rng = rng0(1)
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 3))])
    y = rng.normal(size=200)
    fit = fit_linear(X, y)
    resid = y - X @ fit.beta
    assert np.all(np.abs(X.T @ resid) < 1e-8 * 200)


def test_draw_linear_posterior_degenerate():
    X = np.column_stack([np.ones(3), [0.0, 1.0, 2.0]])
    fit = fit_linear(X, np.array([0.0, 1.0, 2.0]))
    beta, sigma2 = draw_linear_posterior(fit, rng0(0))
    assert sigma2 == 0.0
    np.testing.assert_array_equal(beta, fit.beta)


def test_draw_linear_posterior_moments():
    rng = rng0(2)
    n, k = 50, 2
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ np.array([1.0, 2.0]) + rng.normal(size=n)
    fit = fit_linear(X, y)
    draws = rng0(3)
    betas = np.empty((10_000, k))
    sig = np.empty(10_000)
    for i in range(10_000):
        betas[i], sig[i] = draw_linear_posterior(fit, draws)
    # mean of beta draws recovers the MLE
    se = np.sqrt(np.var(betas, axis=0, ddof=1) / 10_000)
    assert np.all(np.abs(betas.mean(axis=0) - fit.beta) < 3 * se)
    # inverse-chi-square mean: E sigma2* = SSE / (n - k - 2)
    expected = fit.sse / (n - k - 2)
    assert sig.mean() == pytest.approx(expected, rel=0.05)


# ---------------------------------------------------------------------------
# logistic regression

def test_logistic_intercept_only_half():
    fit = fit_logistic(np.ones((2, 1)), np.array([0.0, 1.0]))
    assert fit.converged
    assert fit.beta[0] == pytest.approx(0.0, abs=1e-8)


def test_logistic_separation_flagged():
    fit = fit_logistic(np.ones((6, 1)), np.zeros(6))
    assert not fit.converged


def test_logistic_matches_grid_search_oracle():
    # single-coefficient model on x (no intercept); the likelihood has a
    # proper interior maximum here
    x = np.array([0.0, 1.0, 1.0, 2.0])
    X = x[:, None]
    y = np.array([0.0, 0.0, 1.0, 1.0])

    def ll(b):
        p = expit(b * x)
        return float(np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))

    lo, hi = -10.0, 10.0
    for _ in range(60):
        grid = np.linspace(lo, hi, 41)
        values = np.array([ll(b) for b in grid])
        best = grid[values.argmax()]
        span = (hi - lo) / 15
        lo, hi = best - span, best + span

    fit = fit_logistic(X, y)
    assert fit.converged
    assert abs(fit.beta[0] - best) < 1e-5


def test_logistic_rejects_nonbinary_response():
    with pytest.raises(FitError):
        fit_logistic(np.ones((3, 1)), np.array([0.0, 0.5, 1.0]))


def test_glm_posterior_draw_requires_convergence():
    fit = fit_logistic(np.ones((6, 1)), np.zeros(6))
    with pytest.raises(FitError):
        draw_glm_posterior(fit, rng0(0))


def test_glm_posterior_covariance_matches_fit():
    rng = rng0(4)
    n = 400
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < expit(X @ np.array([0.3, 0.8]))).astype(float)
    fit = fit_logistic(X, y)
    gen = rng0(5)
    draws = np.array([draw_glm_posterior(fit, gen) for _ in range(10_000)])
    emp = np.cov(draws.T)
    np.testing.assert_allclose(emp, fit.covariance, rtol=0.10)


def test_glm_posterior_seed_reproducible():
    fit = fit_logistic(np.column_stack([np.ones(4), [0.0, 1.0, 1.0, 2.0]]),
                       np.array([0.0, 0.0, 1.0, 1.0]))
    a = draw_glm_posterior(fit, rng0(42))
    b = draw_glm_posterior(fit, rng0(42))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# gradients against finite differences

def _finite_diff(fun, beta, step=1e-5):
    grad = np.empty_like(beta)
    for j in range(beta.size):
        up, dn = beta.copy(), beta.copy()
        up[j] += step
        dn[j] -= step
        grad[j] = (fun(up) - fun(dn)) / (2 * step)
    return grad


def test_logistic_gradient_matches_finite_differences():
    rng = rng0(6)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    y = (rng.random(50) < 0.5).astype(float)
    for _ in range(5):
        beta = rng.normal(scale=0.7, size=3)
        _, score, _ = logistic_loglik(X, y, beta)
        fd = _finite_diff(lambda b: logistic_loglik(X, y, b)[0], beta)
        assert np.all(np.abs(score - fd) <= 1e-4 * np.maximum(np.abs(fd), 1.0))


def test_cox_gradient_matches_finite_differences():
    rng = rng0(7)
    n = 60
    X = rng.normal(size=(n, 2))
    time = rng.exponential(1.0, n) + 0.01
    event = (rng.random(n) < 0.6).astype(float)
    for _ in range(5):
        beta = rng.normal(scale=0.5, size=2)
        _, score, _ = cox_loglik(X, time, event, beta)
        fd = _finite_diff(lambda b: cox_loglik(X, time, event, b)[0], beta)
        assert np.all(np.abs(score - fd) <= 1e-4 * np.maximum(np.abs(fd), 1.0))


# ---------------------------------------------------------------------------
# Cox model

def test_cox_score_hand_computed():
    # times (1,2,3) all events, x = (1,0,1): risk-set means 2/3, 1/2, 1
    X = np.array([[1.0], [0.0], [1.0]])
    _, score, _ = cox_loglik(X, np.array([1.0, 2.0, 3.0]), np.ones(3), np.zeros(1))
    assert score[0] == pytest.approx(-1.0 / 6.0, abs=1e-12)


def test_cox_constant_covariate_rejected():
    X = np.ones((5, 1))
    with pytest.raises(FitError):
        fit_cox(X, np.arange(1.0, 6.0), np.ones(5))


def test_cox_matches_grid_search_oracle():
    rng = rng0(8)
    n = 20
    x = rng.normal(size=(n, 1))
    time = rng.exponential(1.0, n) * np.exp(-0.8 * x[:, 0]) + 1e-3
    event = (rng.random(n) < 0.7).astype(float)
    if not event.any():
        event[0] = 1.0

    def partial_ll(b):
        # independent implementation: direct risk-set sums per event
        total = 0.0
        for i in range(n):
            if event[i] == 1.0:
                risk = time >= time[i]
                total += b * x[i, 0] - np.log(np.sum(np.exp(b * x[risk, 0])))
        return total

    lo, hi = -5.0, 5.0
    for _ in range(60):
        grid = np.linspace(lo, hi, 31)
        values = np.array([partial_ll(b) for b in grid])
        best = grid[values.argmax()]
        span = (hi - lo) / 10
        lo, hi = best - span, best + span

    fit = fit_cox(x, time, event)
    assert abs(fit.beta[0] - best) < 1e-4


def test_breslow_hand_computed_equals_nelson_aalen():
    X = np.array([[1.0], [0.0], [1.0]])
    time = np.array([1.0, 2.0, 3.0])
    event = np.ones(3)
    base = breslow_baseline(X, time, event, np.zeros(1))
    np.testing.assert_allclose(base.cumvals, [1 / 3, 5 / 6, 11 / 6])
    na = nelson_aalen(time, event)
    np.testing.assert_allclose(na.cumvals, base.cumvals)
    np.testing.assert_array_equal(na.knots, base.knots)


def test_breslow_no_events_zero_everywhere():
    base = breslow_baseline(np.zeros((4, 0)), np.arange(1.0, 5.0), np.zeros(4), np.zeros(0))
    assert base.knots.size == 0
    assert float(base(100.0)) == 0.0


def test_breslow_jumps_track_riskset_denominators():
    rng = rng0(9)
    n = 30
    X = rng.normal(size=(n, 1))
    time = rng.exponential(1.0, n) + 0.01
    event = (rng.random(n) < 0.5).astype(float)
    event[:2] = 1.0
    beta = np.array([0.7])
    base = breslow_baseline(X, time, event, beta)
    jumps = base.jumps()
    for knot, jump in zip(base.knots, jumps):
        risk = time >= knot
        d_t = np.sum((time == knot) & (event == 1.0))
        denom = np.sum(np.exp(X[risk, 0] * beta[0]))
        assert jump == pytest.approx(d_t / denom, rel=1e-12)


def test_nelson_aalen_all_censored():
    na = nelson_aalen(np.arange(1.0, 6.0), np.zeros(5))
    assert na.knots.size == 0
    assert float(na(3.0)) == 0.0


def test_draw_cox_posterior_tiny_covariance_reproduces_fit():
    rng = rng0(10)
    n = 120
    X = rng.normal(size=(n, 1))
    time = rng.exponential(1.0, n) * np.exp(-X[:, 0]) + 1e-3
    event = np.ones(n)
    fit = fit_cox(X, time, event)
    shrunk = type(fit)(beta=fit.beta, covariance=fit.covariance * 1e-20, baseline=fit.baseline)
    beta, baseline = draw_cox_posterior(shrunk, X, time, event, rng0(11))
    np.testing.assert_allclose(beta, fit.beta, atol=1e-8)
    np.testing.assert_allclose(baseline.cumvals, fit.baseline.cumvals, rtol=1e-6)


def test_draw_cox_posterior_baseline_tracks_drawn_beta():
    rng = rng0(12)
    n = 80
    X = rng.normal(size=(n, 1))
    time = rng.exponential(1.0, n) + 1e-3
    event = np.ones(n)
    fit = fit_cox(X, time, event)
    beta, baseline = draw_cox_posterior(fit, X, time, event, rng0(13))
    assert beta[0] != fit.beta[0]
    recomputed = breslow_baseline(X, time, event, beta)
    np.testing.assert_array_equal(baseline.cumvals, recomputed.cumvals)


def test_draw_cox_posterior_seed_reproducible():
    rng = rng0(14)
    n = 60
    X = rng.normal(size=(n, 1))
    time = rng.exponential(1.0, n) + 1e-3
    event = np.ones(n)
    fit = fit_cox(X, time, event)
    a = draw_cox_posterior(fit, X, time, event, rng0(15))
    b = draw_cox_posterior(fit, X, time, event, rng0(15))
    np.testing.assert_array_equal(a[0], b[0])


# ---------------------------------------------------------------------------
# step cumulative hazard and covariance structure

def test_step_cumhazard_evaluation_rules():
    h = StepCumHazard(knots=np.array([1.0, 2.0]), cumvals=np.array([0.5, 1.25]))
    assert float(h(0.999)) == 0.0  # exactly zero before the first knot
    assert float(h(1.0)) == 0.5  # right-continuous: knot carries its jump
    assert float(h(1.5)) == 0.5
    assert float(h(2.0)) == 1.25
    assert float(h(99.0)) == 1.25  # flat extension


def test_step_cumhazard_rejects_decreasing():
    with pytest.raises(ValueError):
        StepCumHazard(knots=np.array([1.0, 2.0]), cumvals=np.array([1.0, 0.5]))


def test_covariances_pass_cholesky():
    rng = rng0(16)
    n = 300
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < expit(X @ np.array([0.2, 0.5]))).astype(float)
    glm = fit_logistic(X, y)
    np.linalg.cholesky(glm.covariance)
    Xc = rng.normal(size=(n, 2))
    time = rng.exponential(1.0, n) + 1e-3
    cox = fit_cox(Xc, time, np.ones(n))
    np.linalg.cholesky(cox.covariance)
    assert np.array_equal(glm.covariance, glm.covariance.T)
    assert np.array_equal(cox.covariance, cox.covariance.T)
