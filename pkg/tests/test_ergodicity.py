import math

import numpy as np
import pytest
from scipy import stats

from hmmlab import Init
from hmmlab.core import stationary_distribution
from hmmlab.errors import InsufficientSamples, ModelError, NoMinorization
from hmmlab.ergodicity import (DriftCert, MinorizationCert, ar1_minorization, block_sums, check_drift_finite,
                               check_drift_sampled, empirical_tail, exact_minorization, observed_chain,
                               regen_tail, split_simulate, tail_shape_fit)
from hmmlab.finite import REMARK13_TRANS
from hmmlab.nonlinear import linear_gaussian_arch

Q2 = np.array([[0.9, 0.1], [0.2, 0.8]])


def lag_corr(x, lag):
    x = x - x.mean()
    return float(np.dot(x[:-lag], x[lag:]) / np.dot(x, x))


def test_exact_minorization_examples():
    row = np.array([0.2, 0.5, 0.3])
    cert = exact_minorization(np.tile(row, (3, 1)), 1)
    assert cert.epsilon == pytest.approx(1.0) and np.allclose(cert.nu, row)
    with pytest.raises(NoMinorization):
        exact_minorization(REMARK13_TRANS, 1)
    cert = exact_minorization(Q2, 1)
    assert cert.epsilon == pytest.approx(0.3)
    assert np.allclose(cert.nu, [2 / 3, 1 / 3])


def test_remark13_two_step_has_no_overlap():
    # Q^2 is the identity, so the columnwise minima vanish
    with pytest.raises(NoMinorization):
        exact_minorization(REMARK13_TRANS, 2)
    cert = exact_minorization(REMARK13_TRANS, 2, small_set=[0])
    assert cert.epsilon == 1.0 and np.allclose(cert.nu, [1.0, 0.0])


def test_full_minorization_regenerates_every_step():
    row = np.array([0.2, 0.5, 0.3])
    trans = np.tile(row, (3, 1))
    trace = split_simulate(trans, 0, exact_minorization(trans, 1), 20_000, 1)
    assert np.all(trace.bells == np.r_[np.ones(20_000), -1])
    assert np.array_equal(trace.regen, np.arange(1, 20_001))
    freq = np.bincount(trace.states[1:], minlength=3) / 20_000
    assert np.allclose(freq, row, atol=0.015)
    tail = regen_tail(trace)
    assert np.all(tail.gaps == 1) and math.isnan(tail.slope)


def test_split_chain_law_matches_plain_chain():
    steps = 10 ** 6
    trace = split_simulate(Q2, 0, exact_minorization(Q2, 1), steps, 2)
    gen = np.random.default_rng(3)
    plain = np.empty(steps + 1, dtype=int)
    plain[0] = 0
    u = gen.random(steps)
    for k in range(steps):
        plain[k + 1] = int(u[k] >= Q2[plain[k], 0])
    a = np.bincount(trace.states, minlength=2) / (steps + 1)
    b = np.bincount(plain, minlength=2) / (steps + 1)
    assert 0.5 * np.abs(a - b).sum() < 0.005


def test_bells_independent_of_state():
    trace = split_simulate(Q2, 0, exact_minorization(Q2, 1), 200_000, 4)
    flipped = trace.bells >= 0
    d = trace.bells[flipped].astype(float)
    x = trace.states[flipped].astype(float)
    r = np.corrcoef(d, x)[0, 1]
    assert abs(r) < 3 / math.sqrt(d.size)
    assert d.mean() == pytest.approx(0.3, abs=3 * math.sqrt(0.21 / d.size))


def test_block_sums_mean_dependence_and_identity():
    trace = split_simulate(Q2, 0, exact_minorization(Q2, 1), 10 ** 6, 5)
    assert np.all(block_sums(trace, lambda x: np.full(x.shape, 2.5), 2.5) == 0)
    xi = block_sums(trace, lambda x: (x == 1).astype(float), 1 / 3)
    assert xi.size > 10 ** 4
    assert abs(xi.mean()) < 3 * xi.std() / math.sqrt(xi.size)
    assert abs(lag_corr(xi, 2)) < 3 / math.sqrt(xi.size)
    half = xi.size // 2
    assert stats.ks_2samp(xi[:half], xi[half:]).pvalue > 0.01


def test_block_sums_need_two_regenerations():
    trace = split_simulate(Q2, 0, exact_minorization(Q2, 1), 1, 0)
    if trace.regen.size < 2:
        with pytest.raises(InsufficientSamples):
            block_sums(trace, lambda x: x, 0.0)


def test_regeneration_gaps_geometric():
    trace = split_simulate(Q2, 0, exact_minorization(Q2, 1), 10 ** 6, 6)
    tail = regen_tail(trace)
    assert tail.slope == pytest.approx(math.log(0.7), rel=0.1)
    K = tail.K[tail.K >= 5 / 0.3]
    assert np.all(np.isfinite(tail.exp_moment[tail.K >= 5 / 0.3])) and K.size > 0
    with pytest.raises(InsufficientSamples):
        regen_tail(split_simulate(Q2, 0, exact_minorization(Q2, 1), 500, 0))


def test_bridged_split_matches_stationary_law():
    trans = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.0, 0.5]])
    cert = exact_minorization(trans, 4)
    trace = split_simulate(trans, 0, cert, 300_000, 7)
    assert np.all(np.diff(trace.sigma) >= cert.m)
    freq = np.bincount(trace.states, minlength=3) / trace.states.size
    assert np.allclose(freq, stationary_distribution(trans), atol=0.01)


def test_certificate_must_minorize():
    bad = exact_minorization(np.array([[0.5, 0.5], [0.5, 0.5]]), 1)
    with pytest.raises(NoMinorization):
        split_simulate(Q2, 0, bad, 10, 0)


def test_ar1_split_chain():
    phi, sigma, c = 0.5, 1.0, 1.0
    cert = ar1_minorization(phi, sigma, c)
    assert cert.epsilon == pytest.approx(2 * stats.norm.sf(0.5))
    xs = np.linspace(-8, 8, 20001)
    assert np.trapezoid(np.exp(cert.nu_logpdf(xs)), xs) == pytest.approx(1.0, abs=1e-6)
    model = linear_gaussian_arch(phi, sigma, 1.0, 1.0)
    trace = split_simulate(model, 0.0, cert, 100_000, 8, theta=np.array([0.0]))
    x = trace.states
    assert np.var(x) == pytest.approx(sigma ** 2 / (1 - phi ** 2), rel=0.05)
    assert abs(lag_corr(x, 1) - phi) < 0.02
    # nu puts mass eps/2 on each half-line, with tail sf((|x| + |phi| c) / sigma)
    a = abs(phi) * c

    def nu_cdf(v):
        upper = stats.norm.sf((np.abs(v) + a) / sigma) / cert.epsilon
        return np.where(v < 0, upper, 1.0 - upper)

    assert stats.kstest(x[trace.regen], nu_cdf).pvalue > 0.001
    with pytest.raises(ModelError):
        two_step = MinorizationCert(cert.small_set, 2, cert.epsilon, nu_sample=cert.nu_sample,
                                    nu_logpdf=cert.nu_logpdf)
        split_simulate(model, 0.0, two_step, 10, 0, theta=np.array([0.0]))


def test_drift_certificates():
    V = np.array([1.0, 2.0])
    assert check_drift_finite(Q2, DriftCert(V, 0.5, 1.0, np.array([True, True]))) <= 0
    assert check_drift_finite(Q2, DriftCert(V, 0.5, 0.0, np.array([False, False]))) > 0
    phi, sigma, c = 0.5, 1.0, 3.0
    cert = DriftCert(lambda x: 1 + np.asarray(x) ** 2, 0.5, 1 + sigma ** 2, lambda x: abs(x) <= c)

    def step(x, size, gen):
        return phi * x + sigma * gen.standard_normal(size)

    # QV(x) = 1 + phi^2 x^2 + sigma^2 <= 0.5 (1 + x^2) + b 1_C
    assert check_drift_sampled(step, cert.V, cert, np.linspace(-20, 20, 41), 20_000, 9) < 0.1


def test_tail_shape_fit_recovers_exact_shape():
    n, K = 500, 3.0
    t = np.linspace(1, 100, 50)
    tail = K * np.exp(-np.minimum(t ** 2 / n, t) / K)
    assert tail_shape_fit(t, tail, n) == pytest.approx(K, rel=1e-6)
    with pytest.raises(InsufficientSamples):
        tail_shape_fit(t, np.zeros_like(t), n)


def test_iid_tail_matches_hoeffding():
    spec = observed_chain(np.array([[0.3, 0.7], [0.3, 0.7]]))
    n = 400
    tab = empirical_tail(spec, [0.0], lambda w: (w[..., 0] == 1).astype(float), 0, n,
                         np.arange(0, 60), 20_000, 10, mean=0.7)
    assert np.all(tab.tail <= np.minimum(1.0, 2 * np.exp(-2 * tab.t ** 2 / n)) + 3 * np.sqrt(0.25 / 20_000))


def test_two_state_tail_shape():
    spec = observed_chain(Q2)
    n = 1000
    sd = math.sqrt(n * (2 / 9) * 1.7 / 0.3)
    tab = empirical_tail(spec, [0.0], lambda w: (w[..., 0] == 1).astype(float), 0, n,
                         np.arange(0, 200), 300_000, 11, mean_steps=10 ** 6)
    assert abs(tab.mean - 1 / 3) < 0.01
    assert np.all(np.diff(tab.tail) <= 0)
    assert np.isfinite(tab.K_hat)
    assert np.all(tab.tail <= tab.bound(2 * tab.K_hat))
    i, j = np.searchsorted(tab.t, 2 * sd), np.searchsorted(tab.t, 4 * sd)
    ratio = math.log(tab.tail[j]) / math.log(tab.tail[i])
    assert 3.0 <= ratio <= 5.0
    pos = tab.tail > 0
    lt = np.log(tab.tail[pos])
    assert np.all(np.diff(lt) <= 1e-12)


def test_empirical_tail_stationary_init_default():
    spec = observed_chain(Q2)
    a = empirical_tail(spec, [0.0], lambda w: w[..., 0].astype(float), 0, 50, [0, 5, 10], 500, 3, mean=1 / 3)
    b = empirical_tail(spec, [0.0], lambda w: w[..., 0].astype(float), 0, 50, [0, 5, 10], 500, 3, mean=1 / 3,
                       init=Init.stationary())
    assert np.array_equal(a.tail, b.tail) and a.tail[0] == 1.0
