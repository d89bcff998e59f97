import numpy as np
import pytest
from hypothesis import given, strategies as st

from contactdiff import schedule as S


@given(n=st.integers(2, 300), kind=st.sampled_from(["cosine", "linear"]))
def test_schedule_tables_are_valid(n, kind):
    s = S.make_schedule(n, kind)
    assert s.betas[0] == 0.0 and np.all(s.betas[1:] > 0) and np.all(s.betas <= 0.999)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.allclose(s.alphas, 1 - s.betas)
    assert np.allclose(np.cumprod(s.alphas), s.alpha_bar)
    assert np.all(s.post_var[1:] > 0)


@given(n=st.integers(3, 200), data=st.data())
def test_posterior_mean_of_clean_signal(n, data):
    # with x_i = sqrt(ab_i) x0 and no noise, the posterior mean is sqrt(ab_{i-1}) x0
    s = S.make_schedule(n)
    i = data.draw(st.integers(1, n))
    x0 = np.array([0.7, -1.3])
    xt = np.sqrt(s.alpha_bar[i]) * x0
    assert np.allclose(S.posterior_mean(s, x0, xt, i), np.sqrt(s.alpha_bar[i - 1]) * x0)


@given(n=st.integers(3, 200), data=st.data())
def test_posterior_variance_formula(n, data):
    s = S.make_schedule(n)
    i = data.draw(st.integers(2, n))
    b, ab, abp = s.betas[i], s.alpha_bar[i], s.alpha_bar[i - 1]
    assert np.isclose(s.post_var[i], b * (1 - abp) / (1 - ab))


def test_first_step_reuses_second_step_variance():
    s = S.make_schedule(20)
    assert s.post_var[1] == s.post_var[2]


def test_invalid_schedules():
    with pytest.raises(ValueError):
        S.make_schedule(1)
    with pytest.raises(ValueError):
        S.make_schedule(10, "quadratic")
    with pytest.raises(IndexError):
        S.make_schedule(10).check_step(11)


def test_q_sample_matches_closed_form():
    s = S.make_schedule(20)
    x0 = np.ones(3)
    eps = np.array([0.1, -0.2, 0.3])
    out = S.q_sample(s, x0, 7, eps)
    assert np.allclose(out, np.sqrt(s.alpha_bar[7]) * x0 + np.sqrt(1 - s.alpha_bar[7]) * eps)
    batch = S.q_sample_batch(s, np.stack([x0, x0]), np.array([7, 7]), np.stack([eps, eps]))
    assert np.allclose(batch, out)
    with pytest.raises(ValueError):
        S.q_sample(s, x0, 7, eps[:2])


def test_posterior_step_shift_is_scale_times_variance_times_gradient():
    s = S.make_schedule(20)
    x0, xt = np.zeros(4), np.ones(4)
    g = np.array([1.0, -2.0, 0.5, 0.0])
    plain = S.posterior_step(s, x0, xt, 5, 0.0, None, np.random.default_rng(0))
    shifted = S.posterior_step(s, x0, xt, 5, 3.0, g, np.random.default_rng(0))
    assert np.allclose(shifted - plain, 3.0 * s.post_var[5] * g)


def test_last_step_is_deterministic_and_rng_required_before():
    s = S.make_schedule(20)
    x0, xt = np.zeros(2), np.ones(2)
    out = S.posterior_step(s, x0, xt, 1, 0.0, None, None)
    assert np.allclose(out, S.posterior_mean(s, x0, xt, 1))
    with pytest.raises(ValueError, match="rng"):
        S.posterior_step(s, x0, xt, 2, 0.0, None, None)


def test_non_finite_guidance_is_reported_with_term_name():
    s = S.make_schedule(20)
    with pytest.raises(S.GuidanceDivergence, match="goal"):
        S.posterior_step(s, np.zeros(2), np.zeros(2), 3, 1.0, np.array([np.inf, 0.0]),
                         np.random.default_rng(0), term="goal")


def _guided_gaussian(n, alpha, samples=20_000, lam=1.0, c=2.0, seed=0):
    # N(0, 1) data has the exact denoiser E[x0 | x_i] = sqrt(ab_i) x_i
    s = S.make_schedule(n)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(samples)
    for i in range(n, 0, -1):
        x0 = np.sqrt(s.alpha_bar[i]) * x
        mu = S.posterior_mean(s, x0, x, i)
        x = S.posterior_step(s, x0, x, i, alpha, -lam * (mu - c), rng)
    return x


def test_guidance_at_every_step_compounds_the_tilt():
    # scale 1 at every step settles near prior * h^2 (mean 4/3 for lam=1, c=2)
    x = _guided_gaussian(100, 1.0)
    assert abs(x.mean() - 4 / 3) < 0.1
