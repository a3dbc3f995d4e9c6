import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from conftest import random_params, random_selection_data
from mnar_robust.core import FitConfig, std_normal_cdf
from mnar_robust.data import SynthSpec, generate_synthetic
from mnar_robust.greene import (RHO_MAX, SIGMA_MIN, DrawMatrix, GreeneParams, SelectionData, SelectionSample,
                                _integrand, check_draw_count, exact_loss_quadrature, fit_greene, loss_and_gradient,
                                per_sample_sim_loglik, sample_sim_likelihood, selection_prob_given_eps, total_loss)


def _closed_form_loss(params, data):
    """sigma = rho = 0: the integrand does not depend on eps."""
    y = np.nan_to_num(data.y)
    f = special.expit((2 * y - 1) * (data.x_pred @ params.beta))
    P = special.ndtr((2 * data.s - 1) * (data.x_sel @ params.gamma))
    return float(-np.mean(np.log(((1 - data.s) + data.s * f) * P)))


def test_selection_prob_examples():
    assert selection_prob_given_eps([0.0], [1.0], 0.0, 2.0, 1.0) == 0.5
    for gx, rho, eps in [(2.0, 0.3, -1.0), (-1.0, 0.9, 3.0)]:
        assert selection_prob_given_eps([gx], [1.0], rho, eps, 0.5) == 0.5
    assert selection_prob_given_eps([0.5], [1.0], 0.6, 1.0, 1.0) == pytest.approx(std_normal_cdf(1.375), abs=1e-12)


def test_selection_prob_rejects_bad_selection():
    with pytest.raises(ValueError):
        selection_prob_given_eps([1.0], [1.0], 0.2, 0.0, 1.5)


def test_params_projection_and_vector_roundtrip():
    p = GreeneParams(np.array([1.0, 2.0]), np.array([3.0]), -1.0, 1.5).projected()
    assert p.sigma == SIGMA_MIN and p.rho == RHO_MAX
    q = GreeneParams.from_vector(p.to_vector(), 2)
    assert np.array_equal(q.to_vector(), p.to_vector())
    assert np.array_equal(GreeneParams.from_dict(p.to_dict()).to_vector(), p.to_vector())


def test_selection_data_validation():
    x = np.ones((2, 2))
    with pytest.raises(ValueError):
        SelectionData(x, [0], np.array([np.nan, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SelectionData(x, [0], np.array([2.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SelectionData(x, [5], np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SelectionData(x, [0], np.array([0.0, 1.0]), np.array([1.0, 1.2]))


def test_draw_count_guard():
    check_draw_count(100, 11)
    with pytest.raises(ValueError):
        check_draw_count(100, 10)


def test_unselected_sample_drops_the_outcome_factor():
    rng = np.random.default_rng(0)
    params = random_params(rng, 2, 3)
    eps = rng.standard_normal(500)
    x = np.r_[1.0, rng.standard_normal(2)]
    got = sample_sim_likelihood(params, SelectionSample(x, x[:2], None, 0.0), eps)
    k = 1 / math.sqrt(1 - params.rho ** 2)
    want = math.log(np.mean(special.ndtr(-(params.gamma @ x + params.rho * eps) * k)))
    assert got == pytest.approx(want, abs=1e-14)


def test_no_noise_no_correlation_is_draw_free():
    rng = np.random.default_rng(1)
    data = random_selection_data(rng, n=12)
    params = GreeneParams(rng.normal(size=2), rng.normal(size=4), 0.0, 0.0)
    a = total_loss(params, data, DrawMatrix.generate(12, 50, 0))
    b = total_loss(params, data, DrawMatrix.generate(12, 50, 99))
    assert a == pytest.approx(b, abs=1e-14)
    assert a == pytest.approx(_closed_form_loss(params, data), abs=1e-12)
    assert exact_loss_quadrature(params, data) == pytest.approx(_closed_form_loss(params, data), abs=1e-10)


def test_per_sample_matches_scalar_path():
    rng = np.random.default_rng(2)
    data = random_selection_data(rng, n=6, soft=True)
    params = random_params(rng, 2, 4)
    eps = rng.standard_normal((6, 300))
    vec = per_sample_sim_loglik(params, data, eps)
    for i in range(6):
        assert sample_sim_likelihood(params, data[i], eps[i]) == pytest.approx(vec[i], abs=1e-12)


def test_single_sample_and_duplication_invariance():
    rng = np.random.default_rng(3)
    data = random_selection_data(rng, n=9)
    params = random_params(rng, 2, 4)
    d = DrawMatrix.generate(9, 40, 0)
    one = total_loss(params, data.subset([0]), d.draws[:1])
    assert one == pytest.approx(-per_sample_sim_loglik(params, data.subset([0]), d.draws[:1])[0])
    twice = data.subset(np.r_[np.arange(9), np.arange(9)])
    assert total_loss(params, twice, np.vstack([d.draws, d.draws])) == pytest.approx(total_loss(params, data, d),
                                                                                     abs=1e-14)


def test_quadrature_node_convergence():
    rng = np.random.default_rng(4)
    data = random_selection_data(rng, n=10)
    params = random_params(rng, 2, 4)
    assert abs(exact_loss_quadrature(params, data, 20) - exact_loss_quadrature(params, data, 40)) < 1e-6
    with pytest.raises(ValueError):
        exact_loss_quadrature(params, data, 10)


def test_simulated_loss_within_three_standard_errors_of_quadrature():
    rng = np.random.default_rng(5)
    data = random_selection_data(rng, n=5)
    params = random_params(rng, 2, 4)
    eps = DrawMatrix.generate(5, 1_000_000, 0).draws
    w, P, *_ = _integrand(params, data, eps)
    lik = w * P
    se = np.sqrt(np.sum((lik.std(axis=1) / np.sqrt(eps.shape[1]) / lik.mean(axis=1)) ** 2)) / data.n
    gap = abs(total_loss(params, data, eps) - exact_loss_quadrature(params, data))
    assert gap < 3 * se + 1e-9


def test_unselected_samples_give_zero_beta_gradient():
    rng = np.random.default_rng(6)
    data = random_selection_data(rng, n=10)
    data = SelectionData(data.x_sel, data.pred_idx, np.full(10, np.nan), np.zeros(10))
    _, grad = loss_and_gradient(random_params(rng, 2, 4), data, DrawMatrix.generate(10, 30, 0))
    assert np.all(grad.beta == 0.0) and grad.sigma == 0.0


def test_soft_selection_moves_beta():
    rng = np.random.default_rng(7)
    x = np.c_[np.ones(10), rng.standard_normal((10, 3))]
    data = SelectionData(x, [0, 1], (rng.random(10) < 0.5).astype(float), np.full(10, 0.3))
    _, grad = loss_and_gradient(random_params(rng, 2, 4), data, DrawMatrix.generate(10, 30, 0))
    assert np.any(grad.beta != 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_gradient_matches_central_differences(seed, soft):
    rng = np.random.default_rng(seed)
    data = random_selection_data(rng, n=15, soft=soft)
    params = random_params(rng, 2, 4)
    draws = DrawMatrix.generate(15, 32, seed)
    _, grad = loss_and_gradient(params, data, draws)
    vec, h = params.to_vector(), 1e-6
    for j in range(vec.size):
        up, dn = vec.copy(), vec.copy()
        up[j] += h
        dn[j] -= h
        fd = (total_loss(GreeneParams.from_vector(up, 2), data, draws)
              - total_loss(GreeneParams.from_vector(dn, 2), data, draws)) / (2 * h)
        a = grad.to_vector()[j]
        assert abs(a - fd) <= 1e-5 * max(abs(a), abs(fd), 1e-6)


def test_fit_is_deterministic_and_descends():
    ds = generate_synthetic(SynthSpec(500, (-0.5, 1.0, -1.0), (0.2, 0.8, 0.5, 1.0, -0.6), (0, 1, 2), seed=2))
    data = ds.to_selection_data()
    a = fit_greene(data, FitConfig(seed=1))
    b = fit_greene(data, FitConfig(seed=1))
    assert a.params.to_vector().tobytes() == b.params.to_vector().tobytes()
    trace = np.asarray(a.loss_trace)
    assert np.all(np.diff(trace[10:]) <= 1e-12)
    assert a.params.sigma >= SIGMA_MIN and abs(a.params.rho) <= RHO_MAX


def test_fit_recovers_outcome_signs_without_correlation():
    beta = (0.2, 1.2, -0.9, 0.7)
    gamma = (0.5, 0.6, 0.5, 1.0, -0.8)
    ds = generate_synthetic(SynthSpec(5000, beta, gamma, (0, 1, 2, 3), sigma=1.0, rho=0.0, seed=3))
    fit = fit_greene(ds.to_selection_data(), FitConfig(R=100, seed=0))
    for b_true, b_hat in zip(beta, fit.params.beta):
        if abs(b_true) > 0.5:
            assert np.sign(b_hat) == np.sign(b_true)


def test_fit_rejects_mismatched_draws():
    rng = np.random.default_rng(8)
    data = random_selection_data(rng, n=10)
    with pytest.raises(ValueError):
        fit_greene(data, FitConfig(), draws=DrawMatrix.generate(9, 30, 0))
