import math

import numpy as np
import pytest

from hmmlab import Init, ModelSpec, ParameterBox, RngStream
from hmmlab.errors import DegenerateLikelihood, ModelError
from hmmlab.finite import categorical_hmm, gaussian_2state, remark13_limit, remark13_model
from hmmlab.mle import (approx_mle, consistency_experiment, entropy_rate, loglik_path,
                        orbit_distance, simulate_path)


def test_quadratic_objective():
    res = approx_mle(lambda t: -(t[0] - 0.3) ** 2, ParameterBox([0.0], [1.0]))
    assert abs(res.theta_hat[0] - 0.3) < 1e-4
    assert res.gap_bound == 0.0


def test_constant_objective_picks_smallest_point():
    box = ParameterBox([-1.0, 2.0], [1.0, 3.0])
    res = approx_mle(lambda t: 1.5, box)
    assert np.array_equal(res.theta_hat, [-1.0, 2.0])


def test_remark13_limit_objective_boundary():
    box = remark13_model().box
    res = approx_mle(lambda t: remark13_limit(t[0], 0.7, 2), box)
    assert res.theta_hat[0] == pytest.approx(0.5, abs=1e-4)


def test_all_minus_inf_is_degenerate():
    with pytest.raises(DegenerateLikelihood):
        approx_mle(lambda t: -math.inf, ParameterBox([0.0], [1.0]))
    with pytest.raises(DegenerateLikelihood):
        approx_mle(lambda t: math.nan, ParameterBox([0.0], [1.0]))


def _bumps(gen):
    centers = gen.uniform(0, 1, size=(4, 2))
    heights = gen.uniform(0.5, 2.0, size=4)
    widths = gen.uniform(0.05, 0.3, size=4)

    def f(t):
        d2 = np.sum((centers - t) ** 2, axis=1)
        return float(np.log(np.sum(heights * np.exp(-d2 / widths ** 2)) + 1e-3))
    return f


def test_argmax_invariant_under_scaling():
    gen = np.random.default_rng(0)
    box = ParameterBox([0.0, 0.0], [1.0, 1.0])
    for _ in range(20):
        f = _bumps(gen)
        c = gen.uniform(0.01, 100.0)
        a = approx_mle(f, box, per_dim=17)
        b = approx_mle(lambda t: c * f(t), box, per_dim=17)
        assert np.allclose(a.theta_hat, b.theta_hat, atol=1e-12)


def test_refinement_never_below_grid_best():
    gen = np.random.default_rng(1)
    box = ParameterBox([0.0, 0.0], [1.0, 1.0])
    for _ in range(20):
        f = _bumps(gen)
        res = approx_mle(f, box, per_dim=9)
        grid_best = max(f(t) for t in box.grid(9))
        assert res.value >= grid_best
        assert f(res.theta_hat) == res.value
        assert box.contains(res.theta_hat)


def test_orbit_distance_examples():
    box = ParameterBox([0.0, 0.0], [5.0, 5.0])
    assert orbit_distance([1.0, 2.0], [4.0, 6.0], box) == pytest.approx(5.0)
    swap = gaussian_2state().box
    assert orbit_distance([2.0, 0.0], [0.0, 2.0], swap) == 0.0
    single = ParameterBox([0.0], [1.0], equivalence="custom-finite-orbit", orbit_fn=lambda t: [t])
    assert orbit_distance([0.2], [0.7], single) == pytest.approx(0.5)


def test_consistency_order_and_parallelism_invariant():
    spec = gaussian_2state()
    kw = dict(schedule=[50, 100], replicates=4, rng=RngStream(7), per_dim=9)
    base = consistency_experiment(spec, spec.true_theta, Init.stationary(), **kw)
    rev = consistency_experiment(spec, spec.true_theta, Init.stationary(), order=[3, 1, 0, 2], **kw)
    par = consistency_experiment(spec, spec.true_theta, Init.stationary(), parallelism=4, **kw)
    for other in (rev, par):
        assert np.array_equal(base.theta_hats, other.theta_hats)
        assert np.array_equal(base.distances, other.distances)
    assert np.all(base.distances >= 0)


def test_consistency_rejects_bad_schedule():
    spec = gaussian_2state()
    with pytest.raises(ModelError):
        consistency_experiment(spec, spec.true_theta, Init.stationary(), [100, 50], 1, 0)


def test_prefix_reuse_matches_fresh_fit():
    spec = gaussian_2state()
    rep = consistency_experiment(spec, spec.true_theta, Init.stationary(), [60, 120], 1,
                                 RngStream(3), per_dim=9)
    y = simulate_path(spec, spec.true_theta, Init.stationary(), 120, RngStream(3).child(0))
    res = approx_mle(lambda t: loglik_path(spec, t, Init.stationary(), y[:61])[60] / 60,
                     spec.box, per_dim=9)
    assert np.array_equal(rep.theta_hats[0, 0], res.theta_hat)


def test_entropy_rate_iid_reduction():
    trans = np.array([[0.3, 0.7], [0.3, 0.7]])
    emit = np.array([[0.8, 0.2], [0.1, 0.9]])
    spec = ModelSpec("finite", categorical_hmm(trans, emit), ParameterBox([0.0], [1.0]), np.array([0.5]))
    marginal = trans[0] @ emit
    gen = np.random.default_rng(2)
    draws = gen.choice(2, size=10 ** 6, p=marginal)
    mc = float(np.mean(np.log(marginal[draws])))
    (_, rate), = entropy_rate(spec, [0.5], Init.stationary(), [10 ** 5], 11)
    assert rate == pytest.approx(mc, rel=0.02)


def test_entropy_rate_init_insensitive():
    spec = gaussian_2state()
    y = simulate_path(spec, spec.true_theta, Init.stationary(), 10 ** 5, 5)
    a = loglik_path(spec, spec.true_theta, Init.point_mass(0), y)[-1] / 10 ** 5
    b = loglik_path(spec, spec.true_theta, Init.from_weights([0.2, 0.8]), y)[-1] / 10 ** 5
    assert abs(a - b) < 1e-2


def test_entropy_rate_remark13_conditioned():
    (_, rate), = entropy_rate(remark13_model(), [0.7], Init.point_mass(0), [10 ** 5], 4,
                              data_init=Init.point_mass(1))
    assert rate == pytest.approx(-0.9497835, abs=1e-2)


@pytest.mark.slow
def test_remark13_dichotomy():
    spec = remark13_model()
    for x0, target in ((1, 0.5), (0, 0.7)):
        rep = consistency_experiment(spec, [0.7], Init.point_mass(0), [10 ** 5], 3, RngStream(9, x0),
                                     data_init=Init.point_mass(x0))
        assert np.all(np.abs(rep.theta_hats[0, :, 0] - target) < 0.02)
    rep = consistency_experiment(spec, [0.7], Init.from_weights([0.5, 0.5]), [10 ** 5], 3, RngStream(9, 5),
                                 data_init=Init.point_mass(1))
    assert np.all(np.abs(rep.theta_hats[0, :, 0] - 0.7) < 0.02)
