import numpy as np
import pytest
from scipy.special import expit, ndtri

from mnar_robust.biascorr import (NoUnlabeledWarning, assign_pseudolabels, build_modified_training_set,
                                  estimate_soft_selection, run_biascorr, split_labeled)
from mnar_robust.core import FitConfig, PredictorParams
from mnar_robust.data import SynthSpec, generate_synthetic
from mnar_robust.greene import DrawMatrix, GreeneParams, SelectionData, _integrand, fit_greene


def _constant(prob):
    # a probit predictor with zero weights outputs Phi(bias)
    return PredictorParams("probit", np.zeros(2), float(ndtri(prob)))


def _small_sets():
    rng = np.random.default_rng(0)
    x = np.c_[np.ones(5), rng.standard_normal((5, 2))]
    d_s = SelectionData(x[:3], [0, 1], np.array([1.0, 0.0, 1.0]), np.ones(3))
    d_u = SelectionData(x[3:], [0, 1], np.full(2, np.nan), np.zeros(2))
    return d_s, d_u


def test_soft_selection_is_the_mean_probability():
    x = np.zeros((4, 2))
    assert estimate_soft_selection(_constant(0.4), x) == pytest.approx(0.4)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2))
    g = PredictorParams("logit", np.zeros(2), 0.0)
    assert estimate_soft_selection(g, x) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        estimate_soft_selection(g, np.zeros((0, 2)))


def test_pseudolabels_use_a_strict_threshold():
    x = np.zeros((1, 2))
    assert assign_pseudolabels(_constant(0.7), x).tolist() == [1]
    assert assign_pseudolabels(PredictorParams("logit", np.zeros(2), 0.0), x).tolist() == [0]
    assert assign_pseudolabels(_constant(0.3), x).tolist() == [0]


def test_modified_set_layout():
    d_s, d_u = _small_sets()
    m = build_modified_training_set(d_s, d_u, 0.25, np.array([1, 0]))
    assert m.n == 5
    assert m.s.tolist() == [1, 1, 1, 0.25, 0.25]
    assert m.y[3:].tolist() == [1.0, 0.0]
    with pytest.raises(ValueError):
        build_modified_training_set(d_s, d_u, 0.25, np.array([1]))
    with pytest.raises(ValueError):
        build_modified_training_set(d_s, d_u, 1.5, np.array([1, 0]))


def test_zero_soft_value_reproduces_the_unselected_branch():
    d_s, d_u = _small_sets()
    m = build_modified_training_set(d_s, d_u, 0.0, np.array([1, 1]))
    orig = SelectionData(np.vstack([d_s.x_sel, d_u.x_sel]), [0, 1], np.r_[d_s.y, d_u.y], np.r_[d_s.s, d_u.s])
    params = GreeneParams(np.array([0.3, -0.2]), np.array([0.1, 0.5, -0.4]), 0.8, 0.4)
    eps = DrawMatrix.generate(5, 20, 0).draws
    w1, P1, *_ = _integrand(params, m, eps)
    w0, P0, *_ = _integrand(params, orig, eps)
    assert np.array_equal(w1 * P1, w0 * P0)


def test_half_soft_value_with_positive_pseudolabels():
    d_s, d_u = _small_sets()
    m = build_modified_training_set(d_s, d_u, 0.5, np.array([1, 1]))
    params = GreeneParams(np.array([0.3, -0.2]), np.array([0.1, 0.5, -0.4]), 0.8, 0.4)
    eps = DrawMatrix.generate(5, 20, 0).draws
    w, *_ = _integrand(params, m, eps)
    f1 = expit((m.x_pred[3:] @ params.beta)[:, None] + params.sigma * eps[3:])
    assert np.allclose(w[3:], 0.5 + 0.5 * f1, atol=1e-15)


def test_split_labeled_rejects_soft_input():
    d_s, d_u = _small_sets()
    soft = SelectionData(d_u.x_sel, [0, 1], np.array([1.0, 0.0]), np.array([0.3, 0.3]))
    with pytest.raises(ValueError):
        split_labeled(soft)


def test_no_unlabeled_reduces_to_greene():
    ds = generate_synthetic(SynthSpec(300, (-0.5, 1.0, -0.8), (0.2, 0.6, 0.5, 1.0, -0.8), (0, 1, 2), seed=4))
    data = ds.to_selection_data()
    d_s, _ = split_labeled(data)
    cfg = FitConfig(seed=2, max_iters=300)
    with pytest.warns(NoUnlabeledWarning):
        out = run_biascorr(d_s, cfg=cfg)
    ref = fit_greene(d_s, cfg)
    assert out.h_params.to_vector().tobytes() == ref.params.to_vector().tobytes()


def test_fixed_soft_value_skips_selection_model():
    ds = generate_synthetic(SynthSpec(300, (-0.5, 1.0, -0.8), (0.2, 0.6, 0.5, 1.0, -0.8), (0, 1, 2), seed=5))
    out = run_biascorr(ds.to_selection_data(), cfg=FitConfig(max_iters=200), s_bar=0.3)
    assert out.g_s is None and out.s_bar == 0.3
    assert out.modified_set_size == ds.n
    # the modified set keeps the training rows in place
    assert np.array_equal(out.modified.x_sel, ds.x_sel)


def test_mlp_outcome_model_runs():
    ds = generate_synthetic(SynthSpec(300, (-0.5, 1.0, -0.8), (0.2, 0.6, 0.5, 1.0, -0.8), (0, 1, 2), seed=6))
    out = run_biascorr(ds.to_selection_data(), "logit", "mlp", FitConfig(max_iters=150))
    assert out.g_y.kind == "mlp" and 0 < out.s_bar < 1
    assert out.pseudolabels.shape == (int(np.sum(ds.s == 0)),)
