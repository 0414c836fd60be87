import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from memreid.loss import anchor_gradient, oim_loss, pairwise_loss
from memreid.memory import LookupTable, cosine_similarities

from conftest import unit

mpmath.mp.dps = 50


def naive_loss(s_p, s_n, gamma):
    """Direct double sum, no shifting, in 50-digit arithmetic."""
    total = mpmath.mpf(1)
    for sp, sn in itertools.product(s_p, s_n):
        total += mpmath.exp(mpmath.mpf(gamma) * (mpmath.mpf(float(sn)) - mpmath.mpf(float(sp))))
    return mpmath.log(total)


def fd_grad(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor)


def test_zero_margin_is_log2():
    for gamma in (1.0, 16.0, 300.0):
        assert pairwise_loss([0.3], [0.3], gamma).value == pytest.approx(0.6931471805599453, rel=1e-15)


def test_empty_positive_set():
    res = pairwise_loss([], [0.1, 0.5, 0.9], 16.0)
    assert res.value == 0.0
    assert res.grad_s_p.shape == (0,) and np.all(res.grad_s_n == 0)


def test_single_pair_value():
    # log(1 + exp(-12.8)) evaluated with mpmath at 50 digits
    expected = 2.7607687611116156e-06
    assert pairwise_loss([0.9], [0.1], 16.0).value == pytest.approx(expected, rel=1e-12)


def test_matches_naive_formula_k2_j3(rng):
    s_p, s_n = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 3)
    assert pairwise_loss(s_p, s_n, 16.0).value == pytest.approx(float(naive_loss(s_p, s_n, 16.0)), rel=1e-10)


def test_rejects_nan_and_bad_gamma():
    with pytest.raises(ValueError):
        pairwise_loss([np.nan], [0.1])
    with pytest.raises(ValueError):
        pairwise_loss([0.1], [0.2], gamma=0.0)


@pytest.mark.parametrize("delta", [1e4, -1e4])
def test_extreme_exponents_finite(delta):
    res = pairwise_loss([0.0], [delta], 1.0)
    assert np.isfinite(res.value)
    assert np.all(np.isfinite(res.grad_s_p)) and np.all(np.isfinite(res.grad_s_n))
    if delta > 0:
        assert res.value == pytest.approx(delta)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_gradient_signs_and_sums(K, J, seed):
    rng = np.random.default_rng(seed)
    res = pairwise_loss(rng.uniform(-1, 1, K), rng.uniform(-1, 1, J), 16.0)
    assert res.value >= 0
    assert np.all(res.grad_s_p <= 0) and np.all(res.grad_s_n >= 0)
    # the loss only depends on differences s_n - s_p
    assert res.grad_s_p.sum() + res.grad_s_n.sum() == pytest.approx(0.0, abs=1e-9)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_monotonicity(K, J, seed):
    rng = np.random.default_rng(seed)
    s_p, s_n = rng.uniform(-0.9, 0.9, K), rng.uniform(-0.9, 0.9, J)
    base = pairwise_loss(s_p, s_n, 4.0).value
    j, i = rng.integers(J), rng.integers(K)
    up_n = s_n.copy()
    up_n[j] += 0.05
    up_p = s_p.copy()
    up_p[i] += 0.05
    assert pairwise_loss(s_p, up_n, 4.0).value > base
    assert pairwise_loss(up_p, s_n, 4.0).value < base


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_exchange_symmetry(K, J, seed):
    rng = np.random.default_rng(seed)
    s_p, s_n = rng.uniform(-1, 1, K), rng.uniform(-1, 1, J)
    a = pairwise_loss(s_p, s_n, 16.0)
    b = pairwise_loss(rng.permutation(s_p), rng.permutation(s_n), 16.0)
    assert a.value == pytest.approx(b.value, rel=1e-13)


def test_similarity_gradients_match_fd(rng):
    for _ in range(100):
        K, J = rng.integers(1, 6, size=2)
        s_p, s_n = rng.uniform(-1, 1, K), rng.uniform(-1, 1, J)
        res = pairwise_loss(s_p, s_n, 16.0)
        gp = fd_grad(lambda x: pairwise_loss(x, s_n, 16.0).value, s_p)
        gn = fd_grad(lambda x: pairwise_loss(s_p, x, 16.0).value, s_n)
        assert rel_err(res.grad_s_p, gp) < 1e-4
        assert rel_err(res.grad_s_n, gn) < 1e-4


def test_anchor_gradient_examples(rng):
    pos, neg = unit(rng, 2, 5), unit(rng, 3, 5)
    zero = pairwise_loss([0.2, 0.3], [0.1, 0.1, 0.1], 16.0)
    zero = type(zero)(zero.value, np.zeros(2), np.zeros(3))
    assert np.array_equal(anchor_gradient(zero, pos, neg), np.zeros(5))
    edge = pairwise_loss([0.5], [], 16.0)
    assert np.array_equal(anchor_gradient(edge, pos[:1], np.zeros((0, 5))), np.zeros(5))
    with pytest.raises(ValueError):
        anchor_gradient(pairwise_loss([0.1], [0.2]), pos, neg)


def test_anchor_gradient_matches_fd_single_pair(rng):
    a, p, n = unit(rng, 8), unit(rng, 1, 8), unit(rng, 1, 8)

    def f(x):
        return pairwise_loss(cosine_similarities(x, p), cosine_similarities(x, n), 16.0).value

    res = pairwise_loss(cosine_similarities(a, p), cosine_similarities(a, n), 16.0)
    assert rel_err(anchor_gradient(res, p, n), fd_grad(f, a)) < 1e-4


def test_no_gradient_into_memory(rng):
    a, pos, neg = unit(rng, 6), unit(rng, 3, 6), unit(rng, 4, 6)
    res = pairwise_loss(cosine_similarities(a, pos), cosine_similarities(a, neg), 16.0)
    g1 = anchor_gradient(res, pos, neg)
    pos_saved = pos.copy()
    pos += 0.1  # mutate the stored memory after the similarities were taken
    g2 = anchor_gradient(res, pos_saved, neg)
    assert np.array_equal(g1, g2)
    assert res.grad_s_p.flags.writeable  # result is a plain value, not a view on memory


def oim_oracle(anchor, proxies, unlabeled, t, tau):
    logits = [mpmath.fsum(mpmath.mpf(float(x)) * mpmath.mpf(float(y)) for x, y in zip(anchor, v)) / tau
              for v in list(proxies) + list(unlabeled)]
    return float(mpmath.log(mpmath.fsum(mpmath.exp(l) for l in logits)) - logits[t])


def test_oim_singleton_is_zero():
    table = LookupTable()
    table.update(3, [1.0, 0.0])
    value, grad = oim_loss([0.6, 0.8], table, np.zeros((0, 2)), 3, 0.1)
    assert value == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(grad, 0.0)


def test_oim_two_orthogonal_proxies():
    table = LookupTable()
    table.update(0, [1.0, 0.0])
    table.update(1, [0.0, 1.0])
    value, _ = oim_loss([1.0, 0.0], table, np.zeros((0, 2)), 0, 1.0)
    assert value == pytest.approx(0.31326168751822283, rel=1e-14)


def test_oim_random_matches_oracle_and_fd(rng):
    table = LookupTable()
    proxies = unit(rng, 5, 6)
    for i, p in enumerate(proxies):
        table.update(10 + i, p)
    unl = unit(rng, 4, 6)
    a = unit(rng, 6)
    value, grad = oim_loss(a, table, unl, 12, 0.25)
    assert value == pytest.approx(oim_oracle(a, proxies, unl, 2, 0.25), rel=1e-10)
    fd = fd_grad(lambda x: oim_loss(x, table, unl, 12, 0.25)[0], a)
    assert rel_err(grad, fd) < 1e-4


def test_oim_unknown_target():
    table = LookupTable()
    table.update(0, [1.0, 0.0])
    with pytest.raises(KeyError):
        oim_loss([1.0, 0.0], table, np.zeros((0, 2)), 5, 1.0)
