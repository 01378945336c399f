import math

import numpy as np
import pytest
from scipy import optimize

from hmmlab import Init, ModelSpec, ParameterBox, simulate
from hmmlab.errors import BudgetExceeded, GridTooSmall, IdentityUndefined
from hmmlab.gaussian import LinearGaussianModel, kalman_loglik
from hmmlab.nonlinear import (ArchModel, Grid, StochVolModel, check_assumptions_NL, jsr_bounds,
                              jsr_upper_bound, linear_gaussian_arch, quadrature_loglik,
                              stochastic_volatility, sv_identities, sv_log_g)

T = np.array([0.0])


def golden_max(f, lo, hi, tol=1e-12):
    res = optimize.minimize_scalar(lambda x: -f(x), bounds=(lo, hi), method="bounded",
                                   options={"xatol": tol})
    return -res.fun


def test_sv_log_g_origin():
    assert sv_log_g(1.0, 0.0, 0.0) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_sv_sup_at_y2():
    sup, _ = sv_identities(2.0)
    assert sup == pytest.approx(0.1209854, abs=1e-7)
    numeric = golden_max(lambda x: sv_log_g(1.0, x, 2.0), -30, 30)
    assert abs(numeric - math.log(sup)) < 1e-6


def test_sv_identities_examples():
    assert sv_identities(1.0)[0] == pytest.approx(0.2419707, abs=1e-7)
    assert sv_identities(2.0)[1] == 0.5
    xs = np.linspace(-40, 40, 400_001)
    assert abs(np.trapezoid(np.exp(sv_log_g(1.0, xs, 1.0)), xs) - 1.0) < 1e-6
    with pytest.raises(IdentityUndefined):
        sv_identities(0.0)


def test_sv_log_g_below_sup():
    gen = np.random.default_rng(0)
    for _ in range(1000):
        x, y, beta = gen.normal(scale=5), gen.normal(scale=3), gen.uniform(0.2, 3)
        if y == 0:
            continue
        assert sv_log_g(beta, x, y) <= math.log(sv_identities(y, beta)[0]) + 1e-12


def test_quadrature_matches_kalman():
    a, r, b, s = 0.5, 1.0, 1.0, 1.0
    arch = linear_gaussian_arch(a, r, b, s)
    lg = LinearGaussianModel.constant(a, r, b, s)
    gen = np.random.default_rng(1)
    _, y = lg.simulate(T, Init.stationary(), 20, gen)
    y = y.ravel()
    ref = kalman_loglik(lg, T, [0.0], [[4 / 3]], y)
    got = quadrature_loglik(arch, T, Init.stationary(), Grid(-12, 12, 2000), y)
    assert abs(got - ref) < 1e-4


def test_quadrature_grid_refinement_sv():
    spec = stochastic_volatility()
    _, y = simulate(spec, spec.true_theta, Init.stationary(), 100, 2)
    a = quadrature_loglik(spec.payload, spec.true_theta, Init.stationary(), Grid(-15, 15, 1000), y)
    b = quadrature_loglik(spec.payload, spec.true_theta, Init.stationary(), Grid(-15, 15, 2000), y)
    assert abs(a - b) < 1e-4


def test_quadrature_small_noise_limit():
    phi, beta = 0.8, 1.0
    model = StochVolModel(lambda t: phi, lambda t: 4e-3, lambda t: beta).arch()
    y = np.array([0.4, -1.1, 0.2, 0.9, -0.3])
    x0 = 1.5
    path = x0 * phi ** np.arange(y.size)
    expected = float(np.sum(sv_log_g(beta, path, y)))
    got = quadrature_loglik(model, T, Init.point_mass(x0), Grid(0.4, 1.7, 2601), y)
    assert got == pytest.approx(expected, abs=2e-3)


def test_quadrature_grid_too_small():
    spec = stochastic_volatility()
    _, y = simulate(spec, spec.true_theta, Init.stationary(), 50, 3)
    with pytest.raises(GridTooSmall):
        quadrature_loglik(spec.payload, spec.true_theta, Init.stationary(), Grid(-1, 1, 200), y)


def test_sv_stationary_variance():
    phi, sigma = 0.9, 0.3
    spec = stochastic_volatility((phi, sigma, 1.0))
    x, _ = simulate(spec, spec.true_theta, Init.stationary(), 10 ** 6, 4)
    assert np.var(x) == pytest.approx(sigma ** 2 / (1 - phi ** 2), rel=0.02)


def test_jsr_examples():
    assert jsr_bounds([0.7 * np.eye(2)], 5) == pytest.approx([0.7] * 5)
    rot = 0.9 * np.array([[0.0, -1.0], [1.0, 0.0]])
    assert jsr_upper_bound([rot], 6) == pytest.approx(0.9)
    diag = [np.diag([0.5, 0.9]), np.diag([0.9, 0.5])]
    bound = jsr_upper_bound(diag, 4)
    assert bound >= 0.9
    products = [np.linalg.multi_dot([diag[i] for i in idx]) if len(idx) > 1 else diag[idx[0]]
                for idx in np.ndindex(2, 2, 2, 2)]
    assert bound <= max(np.linalg.norm(p, 2) for p in products) ** 0.25 + 1e-12


def test_jsr_non_increasing_and_budget():
    gen = np.random.default_rng(5)
    for _ in range(20):
        mats = [gen.normal(size=(2, 2)) * 0.5 for _ in range(3)]
        b = jsr_bounds(mats, 5)
        running = np.minimum.accumulate(b)
        assert all(jsr_upper_bound(mats, k + 1) == pytest.approx(running[k]) for k in range(5))
        assert running[-1] >= max(abs(np.linalg.eigvals(m)).max() for m in mats) - 1e-12
    with pytest.raises(BudgetExceeded):
        jsr_upper_bound([np.eye(2)] * 10, 7)


def test_nl_checks_stochvol_pass():
    rep = check_assumptions_NL(stochastic_volatility(), rng=0, path_steps=20_000)
    assert [rep.status(k) for k in ("NL1", "NL2", "NL3", "NL4", "NL5")] == ["pass"] * 5
    assert "evidence" in rep["NL3"].detail


def test_nl3_fails_for_unit_root():
    spec = ModelSpec("nonlinear-arch", stochastic_volatility().payload,
                     ParameterBox([0.95, 0.1, 0.5], [1.0, 0.6, 1.5]), np.array([1.0, 0.3, 1.0]))
    rep = check_assumptions_NL(spec, rng=0, path_steps=20_000, mc_samples=2000)
    assert rep.status("NL3") == "fail"


def test_nl2_fails_for_vanishing_diffusion():
    base = stochastic_volatility().payload

    def diffusion(theta, X):
        return np.where(np.abs(X)[:, :, None] < 0.5, 0.0, 0.3) * np.ones((X.shape[0], 1, 1))

    model = ArchModel(1, 1, base.drift_matrix, base.drift_offset, diffusion,
                      base.emission_logpdf, base.emission_sample, noise_cdf=None)
    spec = ModelSpec("nonlinear-arch", model, ParameterBox([0.5, 0.1, 0.5], [0.98, 0.6, 1.5]),
                     np.array([0.9, 0.3, 1.0]))
    rep = check_assumptions_NL(spec, rng=0, path_steps=5000, mc_samples=2000)
    assert rep.status("NL2") == "fail"
