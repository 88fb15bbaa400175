import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import expit

from ctmle_cont.data import RngSpec
from ctmle_cont.synthetic import (
    OracleValues,
    SyntheticConfig,
    cached_psi0,
    f0,
    g0,
    oracle_psi0,
    oracle_qbar0,
    oracle_rem20,
    qbar0_from_mean,
    sample,
)

from .oracles import gauss_hermite_free_qbar


def test_p10_covariance_is_identity():
    assert np.array_equal(SyntheticConfig(10).covariance(), np.eye(10))


@pytest.mark.parametrize("p", [10, 17, 20, 40, 50, 126])
def test_covariance_shape_and_positive_definite(p):
    cfg = SyntheticConfig(p)
    sigma = cfg.covariance()
    assert sigma.shape == (p, p) and np.allclose(sigma, sigma.T)
    assert np.linalg.eigvalsh(sigma).min() > 0
    assert cfg.beta.shape == (p,) and cfg.beta[:2].tolist() == [1.0, 1.0]
    assert np.allclose(cfg.beta[2:], 3.0 / (p - 2))


def test_sample_correlations_match_blocks():
    draws = 200_000
    d = sample(SyntheticConfig(20), draws, RngSpec(11))
    corr = np.corrcoef(d.w, rowvar=False)
    expected = SyntheticConfig(20).covariance()
    assert np.max(np.abs(corr - expected)) <= 4 / math.sqrt(draws)
    # the latent block carries both correlation levels
    assert expected[10, 12] == 0.25 and expected[13, 14] == 0.5


def test_point_examples():
    cfg = SyntheticConfig(10)
    assert g0(cfg, np.zeros(10))[0] == 0.5
    assert f0([1], np.zeros((1, 10)))[0] == pytest.approx(0.8)
    assert f0([0], np.ones((1, 10)))[0] == pytest.approx(0.4 * 6)


@given(seed=st.integers(0, 10_000), d1=st.floats(0, 3), d2=st.floats(0, 3))
def test_g0_increases_with_delta(seed, d1, d2):
    lo, hi = sorted((d1, d2))
    w = np.random.default_rng(seed).normal(size=(5, 20))
    assert np.all(g0(SyntheticConfig(20, lo), w) <= g0(SyntheticConfig(20, hi), w))


@given(seed=st.integers(0, 10_000), p=st.integers(10, 60), delta=st.floats(0, 2))
def test_samples_are_valid(seed, p, delta):
    d = sample(SyntheticConfig(p, delta), 50, RngSpec(seed))
    assert d.w.shape == (50, p)
    assert np.all((d.y > 0) & (d.y < 1))
    assert set(np.unique(d.a)) <= {0, 1}


def test_sampling_is_reproducible():
    cfg = SyntheticConfig(30, 1.0)
    a, b = sample(cfg, 40, RngSpec(5, 2)), sample(cfg, 40, RngSpec(5, 2))
    assert np.array_equal(a.w, b.w) and np.array_equal(a.y, b.y)


def test_qbar0_limits():
    assert qbar0_from_mean([0.0])[0] == pytest.approx(0.5, abs=1e-15)
    assert qbar0_from_mean([60.0])[0] == pytest.approx(1.0, abs=1e-15)
    vals = qbar0_from_mean(np.linspace(-3, 3, 25))
    assert np.all(np.diff(vals) > 0)


@pytest.mark.parametrize("mean", [-2.0, -0.3, 0.4, 1.1, 3.5])
def test_qbar0_quadrature_accuracy(mean):
    def integrand(z):
        return expit(mean + 0.2 * z) * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)

    ref, _ = quad(integrand, -12, 12, epsabs=1e-13, epsrel=1e-13)
    assert qbar0_from_mean([mean])[0] == pytest.approx(ref, abs=1e-8)
    assert qbar0_from_mean([mean], nodes=40)[0] == pytest.approx(ref, abs=1e-8)


def test_qbar0_against_monte_carlo():
    cfg = SyntheticConfig(10)
    gen = np.random.default_rng(8)
    for i in range(5):
        a = int(gen.integers(0, 2))
        w = gen.normal(size=10)
        mc, se = gauss_hermite_free_qbar(f0([a], w[None, :])[0], 0.2, 1_000_000, seed=i)
        assert abs(oracle_qbar0(cfg, a, w) - mc) <= 3 * se


def test_noise_free_contrast_against_direct_monte_carlo():
    cfg = SyntheticConfig(10)
    ours, se1 = oracle_psi0(cfg, 1_000_000, RngSpec(4), noise_sd=0.0)
    w = np.random.default_rng(99).standard_normal((1_000_000, 10))
    v = expit(f0(np.ones(len(w)), w)) - expit(f0(np.zeros(len(w)), w))
    ref, se2 = v.mean(), v.std() / math.sqrt(len(v))
    assert abs(ours - ref) <= 3 * math.hypot(se1, se2)


def test_oracle_is_worker_count_independent():
    cfg = SyntheticConfig(20, 0.5)
    one = oracle_psi0(cfg, 600_000, RngSpec(2), workers=1)
    many = oracle_psi0(cfg, 600_000, RngSpec(2), workers=3)
    assert one == many


def test_oracle_rejects_tiny_draws():
    with pytest.raises(ValueError):
        oracle_psi0(SyntheticConfig(10), 100)


def _oracle_pair(cfg):
    def q_true(a, w):
        return oracle_qbar0(cfg, a, w)

    def g_true(w):
        return g0(cfg, w)

    return q_true, g_true


def test_remainder_vanishes_with_either_truth():
    cfg = SyntheticConfig(20, 0.5)
    q_true, g_true = _oracle_pair(cfg)

    def q_bad(a, w):
        return np.clip(q_true(a, w) + 0.05 * np.tanh(w[:, 3]), 0.01, 0.99)

    def g_bad(w):
        return np.clip(expit(0.2 + 0.5 * w[:, 0]), 0.05, 0.95)

    r = oracle_rem20(cfg, q_true, g_bad, draws=50_000, rng=RngSpec(1))
    assert r.rem == 0.0 and r.q_moment == 0.0
    r = oracle_rem20(cfg, q_bad, g_true, draws=50_000, rng=RngSpec(1))
    assert r.rem == 0.0 and r.g_moment == 0.0


def test_oracle_values_bundle():
    cfg = SyntheticConfig(10)
    ov = OracleValues(0.08, 1e-5, cfg)
    w = np.zeros((1, 10))
    assert ov.g0(w)[0] == 0.5
    assert ov.qbar0([1], w)[0] == pytest.approx(qbar0_from_mean([0.8])[0])


def test_psi0_cache_round_trip(tmp_path):
    cache = tmp_path / "oracle.json"
    cfg = SyntheticConfig(10)
    first = cached_psi0(cfg, 20_000, 3, cache)
    assert cache.exists()
    # a second call reads the file; corrupting the value proves it is not recomputed
    text = cache.read_text().replace(repr(first[0]), "0.5")
    cache.write_text(text)
    assert cached_psi0(cfg, 20_000, 3, cache)[0] == 0.5
    assert cached_psi0(cfg, 20_000, 3, None) == first
