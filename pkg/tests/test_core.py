import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kldiff.core import (GaussianParams, assemble_loss, elbo_loss, gaussian_kl, make_batch,
                         mu_from_eps, q_posterior, q_sample_closed, q_sample_step,
                         weighted_loss)
from kldiff.schedules import KLWeightConfig, kl_weights, make_schedule


def _within(est, target, se, k):
    assert abs(est - target) <= k * se, (est, target, se)


# -- forward process ---------------------------------------------------------

def test_step_zero_noise_limit():
    s = make_schedule("linear", 3, 1e-12, 1e-12)
    x = np.linspace(-1, 1, 12).reshape(1, 3, 2, 2)
    out = q_sample_step(x, 2, s, np.clip(np.random.default_rng(0).standard_normal(x.shape), -1, 1))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_step_from_zero_is_scaled_noise():
    s = make_schedule("linear", 4, 0.1, 0.3)
    eps = np.random.default_rng(1).standard_normal((2, 3))
    assert np.array_equal(q_sample_step(np.zeros((2, 3)), 3, s, eps), np.sqrt(s.beta(3)) * eps)


def test_step_moments():
    s = make_schedule("linear", 4, 0.05, 0.4)
    n, t = 100_000, 3
    x_prev = np.tile([0.7, -0.2, 1.0], (n, 1))
    out = q_sample_step(x_prev, t, s, np.random.default_rng(2).standard_normal(x_prev.shape))
    b = s.beta(t)
    mean_target = np.sqrt(1 - b) * x_prev[0]
    for j in range(3):
        _within(out[:, j].mean(), mean_target[j], np.sqrt(b / n), 4)
        _within(out[:, j].var(ddof=1), b, b * np.sqrt(2 / (n - 1)), 4)


def test_shape_mismatch_rejected():
    s = make_schedule("linear", 4, 0.1, 0.2)
    with pytest.raises(ValueError):
        q_sample_step(np.zeros((2, 2)), 1, s, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        q_sample_closed(np.zeros((2, 2)), 1, s, np.zeros((3, 2)))


def test_closed_form_limits():
    s = make_schedule("linear", 5, 1e-14, 1e-14)
    x0 = np.array([[0.3, -0.9]])
    eps = np.array([[1.5, -2.0]])
    np.testing.assert_allclose(q_sample_closed(x0, 5, s, eps), x0, atol=1e-6)
    s = make_schedule("linear", 5, 0.1, 0.3)
    np.testing.assert_array_equal(q_sample_closed(np.zeros((1, 2)), 4, s, eps),
                                  np.sqrt(1 - s.alpha_bar(4)) * eps)


def test_closed_form_matches_five_step_composition():
    s = make_schedule("linear", 5, 0.05, 0.25)
    n = 100_000
    r = np.random.default_rng(3)
    x0 = np.tile([0.9, -0.4], (n, 1))
    x = x0
    for t in range(1, 6):
        x = q_sample_step(x, t, s, r.standard_normal(x.shape))
    direct = q_sample_closed(x0, 5, s, r.standard_normal(x0.shape))
    ab = s.alpha_bar(5)
    for sample in (x, direct):
        for j in range(2):
            _within(sample[:, j].mean(), np.sqrt(ab) * x0[0, j], np.sqrt((1 - ab) / n), 4)
            _within(sample[:, j].var(ddof=1), 1 - ab, (1 - ab) * np.sqrt(2 / (n - 1)), 4)


def test_closed_form_per_example_timesteps():
    s = make_schedule("linear", 6, 0.1, 0.3)
    x0 = np.random.default_rng(4).standard_normal((3, 2, 2))
    eps = np.random.default_rng(5).standard_normal((3, 2, 2))
    t = np.array([1, 4, 6])
    out = q_sample_closed(x0, t, s, eps)
    for i in range(3):
        np.testing.assert_array_equal(out[i], q_sample_closed(x0[i], int(t[i]), s, eps[i]))


# -- posterior ----------------------------------------------------------------

def test_posterior_noiseless_consistency():
    s = make_schedule("linear", 10, 0.01, 0.3)
    x0 = np.array([0.5, -1.0, 0.25])
    for t in range(2, 11):
        post = q_posterior(x0, np.sqrt(s.alpha_bar(t)) * x0, t, s)
        np.testing.assert_allclose(post.mean, np.sqrt(s.alpha_bar(t - 1)) * x0, rtol=1e-12)


def test_posterior_first_step_convention():
    s = make_schedule("linear", 10, 0.01, 0.3)
    x0, xt = np.array([0.2, 0.4]), np.array([1.0, -3.0])
    post = q_posterior(x0, xt, 1, s)
    np.testing.assert_allclose(post.mean, x0, rtol=0, atol=1e-15)
    assert post.var == s.beta(1)


def test_posterior_matches_grid_bayes():
    # T = 2: prior x1 | x0 ~ N(sqrt(a1) x0, b1), likelihood x2 | x1 ~ N(sqrt(a2) x1, b2)
    s = make_schedule("linear", 2, 0.2, 0.35)
    x0, x2 = 0.6, -0.3
    grid = np.linspace(-6, 6, 400_001)
    logp = (-(grid - np.sqrt(s.alpha(1)) * x0) ** 2 / (2 * s.beta(1))
            - (x2 - np.sqrt(s.alpha(2)) * grid) ** 2 / (2 * s.beta(2)))
    w = np.exp(logp - logp.max())
    w /= w.sum()
    mean = np.sum(w * grid)
    var = np.sum(w * (grid - mean) ** 2)
    post = q_posterior(np.array([x0]), np.array([x2]), 2, s)
    assert abs(post.mean[0] - mean) < 1e-3
    assert abs(post.var - var) < 1e-3


@settings(max_examples=50, deadline=None)
@given(T=st.integers(2, 200), lo=st.floats(1e-4, 0.1), span=st.floats(0, 0.5))
def test_posterior_variance_positive(T, lo, span):
    s = make_schedule("linear", T, lo, min(lo + span, 0.9))
    assert np.all(s.posterior_vars > 0)
    assert all(q_posterior(np.zeros(1), np.zeros(1), t, s).var > 0 for t in (2, T))


# -- reverse mean -----------------------------------------------------------

def test_true_noise_recovers_posterior_mean():
    s = make_schedule("linear", 50, 0.001, 0.1)
    r = np.random.default_rng(6)
    x0 = r.uniform(-1, 1, (4, 3, 2, 2))
    for t in (1, 2, 17, 50):
        eps = r.standard_normal(x0.shape)
        xt = q_sample_closed(x0, t, s, eps)
        diff = mu_from_eps(xt, t, eps, s).mean - q_posterior(x0, xt, t, s).mean
        assert np.max(np.abs(diff)) < 1e-9


def test_zero_prediction_and_variance():
    s = make_schedule("linear", 8, 0.05, 0.2)
    xt = np.arange(6.0).reshape(2, 3)
    g = mu_from_eps(xt, 5, np.zeros_like(xt), s)
    np.testing.assert_allclose(g.mean, xt / np.sqrt(s.alpha(5)), rtol=1e-15)
    assert g.var == s.posterior_vars[4]


# -- Gaussian KL ----------------------------------------------------------------

def test_kl_examples():
    p = GaussianParams(np.array([0.3, -2.0]), 0.7)
    assert gaussian_kl(p, p) == 0.0
    assert gaussian_kl(GaussianParams(np.array([1.0]), 1.0),
                       GaussianParams(np.array([0.0]), 1.0)) == 0.5


def test_kl_rejects_bad_input():
    with pytest.raises(ValueError):
        gaussian_kl(GaussianParams(np.zeros(2), 0.0), GaussianParams(np.zeros(2), 1.0))
    with pytest.raises(ValueError):
        gaussian_kl(GaussianParams(np.zeros(2), 1.0), GaussianParams(np.zeros(3), 1.0))


def mc_kl(p, q, n, rng):
    """Monte-Carlo E_p[log p - log q] with its standard error."""
    d = p.mean.size
    x = p.mean + np.sqrt(p.var) * rng.standard_normal((n, d))
    lp = -0.5 * np.sum((x - p.mean) ** 2, axis=1) / p.var - 0.5 * d * np.log(p.var)
    lq = -0.5 * np.sum((x - q.mean) ** 2, axis=1) / q.var - 0.5 * d * np.log(q.var)
    diff = lp - lq
    return diff.mean(), diff.std(ddof=1) / np.sqrt(n)


def test_kl_matches_monte_carlo_four_dims():
    r = np.random.default_rng(7)
    p = GaussianParams(r.standard_normal(4), 0.6)
    q = GaussianParams(r.standard_normal(4), 1.3)
    est, se = mc_kl(p, q, 1_000_000, r)
    _within(est, gaussian_kl(p, q), se, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.floats(1e-3, 10), st.floats(1e-3, 10), st.integers(0, 2**32 - 1))
def test_kl_nonnegative(d, vp, vq, seed):
    r = np.random.default_rng(seed)
    kl = gaussian_kl(GaussianParams(r.standard_normal(d), vp),
                     GaussianParams(r.standard_normal(d), vq))
    assert kl >= 0


# -- losses -------------------------------------------------------------------

def linear_eps(c):
    return lambda xt, t, batch: c * xt


def expected_linear_kl(x0, c, s):
    """Analytic E_eps[KL_t] for eps_hat = c x_t; per-example sum over dims, averaged over batch."""
    out = np.zeros(s.T)
    d = x0[0].size
    for t in range(1, s.T + 1):
        ab, ab_prev = s.alpha_bar(t), s.alpha_bar(t - 1)
        beta, var = s.beta(t), s.posterior_var(t)
        c0 = np.sqrt(ab_prev) * beta / (1 - ab)
        ct = np.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)
        m = ct - (1 - c * beta / np.sqrt(1 - ab)) / np.sqrt(1 - beta)
        a, sd = np.sqrt(ab), np.sqrt(1 - ab)
        sq = (c0 + m * a) ** 2 * np.sum(x0 ** 2, axis=tuple(range(1, x0.ndim))) + m ** 2 * sd ** 2 * d
        out[t - 1] = np.mean(sq) / (2 * var)
    return out


def make_toy():
    s = make_schedule("linear", 6, 0.02, 0.3)
    x0 = np.array([[[0.5, -1.0], [0.25, 1.0]], [[-0.75, 0.0], [1.0, -0.5]]])
    ids = np.zeros((2, 4), dtype=np.int64)
    return s, x0, ids


@pytest.fixture
def toy():
    return make_toy()


def test_stochastic_and_exact_modes_are_unbiased(toy):
    s, x0, ids = toy
    c = 0.4
    target = expected_linear_kl(x0, c, s).sum()
    r = np.random.default_rng(8)
    stoch = np.array([elbo_loss(linear_eps(c), make_batch(x0, ids, False, 1.0, s, r), s).total
                      for _ in range(10_000)])
    _within(stoch.mean(), target, stoch.std(ddof=1) / np.sqrt(stoch.size), 3)
    exact = np.array([elbo_loss(linear_eps(c), make_batch(x0, ids, False, 1.0, s, r, exact=True),
                                s).total for _ in range(2_000)])
    _within(exact.mean(), target, exact.std(ddof=1) / np.sqrt(exact.size), 3)


def test_perfect_denoiser_zero_kl(toy):
    s, x0, ids = toy
    r = np.random.default_rng(9)
    b = make_batch(x0, ids, False, 1.0, s, r, exact=True)
    lb = elbo_loss(lambda xt, t, batch: batch.noise[t[0] - 1], b, s)
    assert np.all(np.abs(lb.per_t) < 1e-9)
    b = make_batch(x0, ids, False, 1.0, s, r)
    assert abs(elbo_loss(lambda xt, t, batch: batch.noise, b, s).total) < 1e-9


@settings(max_examples=40, deadline=None)
@given(c=st.floats(-3, 3), seed=st.integers(0, 2**32 - 1), exact=st.booleans())
def test_loss_nonnegative(c, seed, exact):
    s, x0, ids = make_toy()
    b = make_batch(x0, ids, False, 1.0, s, np.random.default_rng(seed), exact=exact)
    lb = elbo_loss(linear_eps(c), b, s)
    assert lb.total >= 0 and np.all(lb.per_t >= 0)


def test_uniform_weights_identical_to_elbo(toy):
    s, x0, ids = toy
    for exact in (False, True):
        b = make_batch(x0, ids, False, 1.0, s, np.random.default_rng(10), exact=exact)
        a = elbo_loss(linear_eps(0.3), b, s)
        w = weighted_loss(linear_eps(0.3), b, s, KLWeightConfig("uniform"))
        assert a.total == w.total
        assert np.array_equal(a.per_t, w.per_t)


def test_doubling_weights_doubles_total(toy):
    s, x0, ids = toy
    b = make_batch(x0, ids, False, 1.0, s, np.random.default_rng(11), exact=True)
    w = kl_weights(KLWeightConfig("exp-decay", 1.5), s.T)
    _, one = assemble_loss(linear_eps(0.3), b, s, w)
    _, two = assemble_loss(linear_eps(0.3), b, s, 2 * w)
    assert two.total == 2 * one.total


@pytest.mark.parametrize("exact", [True, False])
def test_total_recomposes_from_per_t(toy, exact):
    s, x0, ids = toy
    cfg = KLWeightConfig("exp-decay", 2.0)
    b = make_batch(x0, ids, False, 1.0, s, np.random.default_rng(12), exact=exact)
    lb = weighted_loss(linear_eps(-0.2), b, s, cfg)
    np.testing.assert_array_equal(lb.weights_applied, kl_weights(cfg, s.T))
    recomposed = sum(w * p for w, p in zip(kl_weights(cfg, s.T), lb.per_t))
    assert abs(lb.total - recomposed) <= 1e-9 * abs(recomposed)
