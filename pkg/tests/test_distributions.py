import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vdi import autodiff as ad
from vdi.autodiff import Tensor, backward
from vdi.distributions import (Categorical, DiagGaussian, entropy_gaussian, kl_gaussian,
                               log_prob_categorical, log_prob_gaussian, sample_reparam)


def gauss(mu, sigma):
    return DiagGaussian.from_sigma(np.asarray(mu, float), np.asarray(sigma, float))


def plain_log_prob(mu, sigma, x):
    return float(np.sum(-0.5 * np.log(2 * np.pi) - np.log(sigma) - (x - mu) ** 2 / (2 * sigma**2)))


# -- sample_reparam -----------------------------------------------------------------

def test_sample_zero_noise_is_mean():
    mu = np.array([0.3, -1.2])
    np.testing.assert_array_equal(sample_reparam(gauss(mu, [2.0, 0.5]), np.zeros(2)).data, mu)


def test_sample_standard_normal_returns_noise():
    eps = np.array([0.1, -0.4, 2.0])
    np.testing.assert_allclose(sample_reparam(gauss(np.zeros(3), np.ones(3)), eps).data, eps, atol=1e-15)


def test_sample_grad_wrt_sigma_is_noise():
    eps = np.array([0.7, -1.3])
    log_sigma = Tensor(np.log([1.5, 0.4]), requires_grad=True)
    d = DiagGaussian(Tensor(np.zeros(2)), log_sigma)
    backward(ad.sum(sample_reparam(d, eps)))
    # d/dsigma = eps, so d/dlog_sigma = eps * sigma
    np.testing.assert_allclose(log_sigma.grad / np.array([1.5, 0.4]), eps, rtol=1e-12)


def test_sample_length_mismatch():
    with pytest.raises(ad.ShapeError):
        sample_reparam(gauss([0.0, 0.0], [1.0, 1.0]), np.zeros(3))


def test_sample_moments_converge():
    rng = np.random.default_rng(0)
    mu, sigma = np.array([1.5, -2.0]), np.array([0.5, 3.0])
    s = sample_reparam(gauss(mu, sigma), rng.standard_normal((100_000, 2))).data
    assert np.all(np.abs(s.mean(0) - mu) < 0.01 * np.maximum(np.abs(mu), sigma))
    np.testing.assert_allclose(s.std(0), sigma, rtol=0.01)


# -- log_prob_gaussian --------------------------------------------------------------

def test_log_prob_standard_normal_at_zero():
    assert abs(float(log_prob_gaussian(gauss([0.0], [1.0]), [0.0]).data) + 0.9189385332046727) < 1e-15


@pytest.mark.parametrize("dim", [1, 3, 7])
def test_log_prob_at_mean(dim):
    mu = np.arange(dim, dtype=float)
    val = float(log_prob_gaussian(gauss(mu, np.ones(dim)), mu).data)
    assert abs(val + dim / 2 * math.log(2 * math.pi)) < 1e-12


def test_log_prob_matches_closed_form():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mu, x = rng.normal(size=5), rng.normal(size=5)
        sigma = rng.uniform(0.1, 3.0, size=5)
        got = float(log_prob_gaussian(gauss(mu, sigma), x).data)
        assert abs(got - plain_log_prob(mu, sigma, x)) < 1e-12


def test_log_prob_frozen_value():
    # closed form evaluated by hand in a scratch script
    val = float(log_prob_gaussian(gauss([0.5, -1.0], [2.0, 0.25]), [1.0, 0.0]).data)
    assert abs(val - (-9.1759798858494)) < 1e-12


def test_log_prob_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        log_prob_gaussian(gauss([0.0, 0.0], [1.0, 1.0]), [0.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_log_prob_maximised_at_mean(seed):
    rng = np.random.default_rng(seed)
    mu, sigma = rng.normal(size=3), rng.uniform(0.1, 2, size=3)
    d = gauss(mu, sigma)
    peak = float(log_prob_gaussian(d, mu).data)
    for _ in range(10):
        assert float(log_prob_gaussian(d, mu + rng.normal(scale=0.1, size=3)).data) < peak


# -- KL -----------------------------------------------------------------------------------

def test_kl_self_is_zero():
    d = gauss([0.3, 1.0], [0.5, 2.0])
    assert abs(float(kl_gaussian(d, d).data)) < 1e-15


def test_kl_unit_shift():
    assert abs(float(kl_gaussian(gauss([1.0], [1.0]), gauss([0.0], [1.0])).data) - 0.5) < 1e-15


def test_kl_dimension_mismatch():
    with pytest.raises(ad.ShapeError):
        kl_gaussian(gauss([0.0], [1.0]), gauss([0.0, 0.0], [1.0, 1.0]))


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(2)
    for _ in range(3):
        mq, mp = rng.normal(size=2), rng.normal(size=2)
        sq, sp = rng.uniform(0.3, 2, size=2), rng.uniform(0.3, 2, size=2)
        closed = float(kl_gaussian(gauss(mq, sq), gauss(mp, sp)).data)
        s = mq + sq * rng.standard_normal((1_000_000, 2))
        lq = np.sum(-np.log(sq) - (s - mq) ** 2 / (2 * sq**2), axis=1)
        lp = np.sum(-np.log(sp) - (s - mp) ** 2 / (2 * sp**2), axis=1)
        diff = lq - lp
        se = diff.std() / np.sqrt(len(diff))
        assert abs(diff.mean() - closed) < 3 * se


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), dim=st.integers(1, 6))
def test_kl_non_negative(seed, dim):
    rng = np.random.default_rng(seed)
    q = gauss(rng.normal(size=dim) * 3, rng.uniform(0.01, 5, size=dim))
    p = gauss(rng.normal(size=dim) * 3, rng.uniform(0.01, 5, size=dim))
    assert float(kl_gaussian(q, p).data) >= 0.0
    assert abs(float(kl_gaussian(q, q).data)) < 1e-10


# -- categorical ------------------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 5, 30])
def test_categorical_uniform(n):
    assert abs(float(log_prob_categorical(Categorical(np.zeros(n)), 1).data) + math.log(n)) < 1e-14


def test_categorical_saturation():
    assert float(log_prob_categorical(Categorical(np.array([10.0, -10.0])), 0).data) > -1e-4


def test_categorical_normalised():
    logits = np.random.default_rng(3).normal(size=7) * 4
    total = sum(math.exp(float(log_prob_categorical(Categorical(logits), c).data)) for c in range(7))
    assert abs(total - 1.0) < 1e-12


def test_categorical_out_of_range():
    with pytest.raises(ValueError):
        log_prob_categorical(Categorical(np.zeros(3)), 3)
    with pytest.raises(ValueError):
        log_prob_categorical(Categorical(np.zeros(3)), -1)


def test_categorical_batch_rows():
    logits = np.array([[0.0, 1.0], [2.0, 0.0]])
    out = log_prob_categorical(Categorical(logits), np.array([1, 0])).data
    ref = logits[[0, 1], [1, 0]] - np.log(np.exp(logits).sum(1))
    np.testing.assert_allclose(out, ref, atol=1e-15)


# -- entropy ------------------------------------------------------------------------------

def test_entropy_unit():
    assert abs(float(entropy_gaussian(gauss([0.0], [1.0])).data) - 1.4189385332046727) < 1e-15


def test_entropy_doubling_sigma():
    a = float(entropy_gaussian(gauss([0.0, 0.0], [0.7, 1.3])).data)
    b = float(entropy_gaussian(gauss([0.0, 0.0], [1.4, 2.6])).data)
    assert abs(b - a - 2 * math.log(2)) < 1e-13


def test_entropy_matches_monte_carlo():
    rng = np.random.default_rng(4)
    mu, sigma = np.array([0.5, -1.0, 2.0]), np.array([0.3, 1.0, 2.5])
    d = gauss(mu, sigma)
    s = sample_reparam(d, rng.standard_normal((1_000_000, 3)))
    lp = log_prob_gaussian(DiagGaussian(Tensor(mu), Tensor(np.log(sigma))), s).data
    se = lp.std() / np.sqrt(len(lp))
    assert abs(-lp.mean() - float(entropy_gaussian(d).data)) < 3 * se


def test_from_head_clamps_log_sigma():
    out = Tensor(np.array([[0.0, 10.0], [0.0, -10.0]]))
    d = DiagGaussian.from_head(out, 1)
    np.testing.assert_array_equal(d.log_sigma.data[:, 0], [3.0, -5.0])
