import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnar_robust.biascorr_star import (AugmentationShortfall, build_augmented_set, draw_target_samples,
                                       empirical_freq_augment, run_biascorr_star, sample_key,
                                       selection_estimate_error_bound)
from mnar_robust.core import FitConfig
from mnar_robust.data import SynthSpec, generate_synthetic
from mnar_robust.greene import SelectionData, fit_greene


def test_draw_without_replacement_exhausts_the_pool():
    idx = draw_target_samples(10, 10, 0)
    assert sorted(idx.tolist()) == list(range(10))


def test_draw_with_replacement_when_pool_is_small():
    idx = draw_target_samples(10, 25, 0)
    assert idx.shape == (25,) and idx.min() >= 0 and idx.max() < 10
    assert np.array_equal(idx, draw_target_samples(10, 25, 0))


def test_one_distinct_sample():
    t = np.array([[1.0, 2.0]])
    plan = empirical_freq_augment(np.repeat(t, 2, 0), np.repeat(t, 5, 0), n=5)
    assert plan.added.tolist() == [0, 1, 2]


def test_nothing_to_add_warns():
    t = np.array([[1.0], [2.0]])
    with pytest.warns(AugmentationShortfall):
        plan = empirical_freq_augment(np.repeat(t, 3, 0), t, n=8)
    assert plan.added.size == 0 and plan.shortfall


def test_two_sample_hand_trace():
    t1, t2 = [0.0, 1.0], [1.0, 0.0]
    d_n = np.array([t2, t1, t2, t1, t2])
    plan = empirical_freq_augment(np.array([t1]), d_n, n=5)
    assert [sample_key(d_n[i]) for i in plan.added] == [tuple(t1)] + [tuple(t2)] * 3


def test_sample_key_rounding():
    assert sample_key([0.1 + 1e-9, -0.0]) == sample_key([0.1, 0.0])


@settings(max_examples=50)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=15), st.lists(st.integers(0, 4), min_size=1, max_size=30))
def test_added_counts_never_exceed_the_excess(ds_ids, dn_ids):
    d_s = np.array(ds_ids, dtype=float)[:, None]
    d_n = np.array(dn_ids, dtype=float)[:, None]
    n = len(ds_ids) + len(dn_ids)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AugmentationShortfall)
        plan = empirical_freq_augment(d_s, d_n, n)
    assert len(plan.added) <= n - len(ds_ids)
    assert len(set(plan.added.tolist())) == len(plan.added)
    for v in set(dn_ids):
        added_v = sum(1 for i in plan.added if dn_ids[i] == v)
        assert added_v <= max(dn_ids.count(v) - ds_ids.count(v), 0)


def test_augmented_set_layout():
    rng = np.random.default_rng(0)
    x = np.c_[np.ones(4), rng.standard_normal((4, 2))]
    d_s = SelectionData(x, [0, 1], np.array([1.0, 0.0, 1.0, 0.0]), np.ones(4))
    pool = np.c_[np.ones(20), rng.standard_normal((20, 2))]
    aug, plan = build_augmented_set(d_s, pool, n=10, seed=0)
    assert aug.n == 10 and aug.s[:4].tolist() == [1, 1, 1, 1] and np.all(aug.s[4:] == 0)
    assert np.all(np.isnan(aug.y[4:]))


def test_small_pool_still_fills_the_set():
    rng = np.random.default_rng(1)
    x = np.c_[np.ones(6), rng.standard_normal((6, 2))]
    d_s = SelectionData(x, [0, 1], np.array([1.0, 0.0, 1.0, 0.0, 1.0, 1.0]), np.ones(6))
    pool = np.c_[np.ones(3), rng.standard_normal((3, 2))]
    aug, plan = build_augmented_set(d_s, pool, n=12, seed=0)
    assert plan.drawn_idx.shape == (12,) and set(plan.drawn_idx.tolist()) <= {0, 1, 2}
    assert aug.n == 12 and not plan.shortfall


def test_error_bound_examples():
    assert selection_estimate_error_bound(math.e / 2, 2, 1 / math.e) == pytest.approx(1.0, abs=1e-12)
    b100 = selection_estimate_error_bound(10, 100, 0.05)
    assert b100 == pytest.approx(math.sqrt(2 * math.log(20) / 100), abs=1e-12)
    assert b100 == pytest.approx(0.2448, abs=1e-4)
    assert selection_estimate_error_bound(10, 400, 0.05) == pytest.approx(b100 / 2, abs=1e-12)
    with pytest.raises(ValueError):
        selection_estimate_error_bound(10, 100, 1.0)


def test_unbiased_pool_control():
    """No selection bias: augmenting from the same distribution stays close to Greene on D_s."""
    spec = SynthSpec(1200, (-0.5, 1.0, -0.8), (2.5, 0.0, 0.0, 0.0, 0.0), (0, 1, 2), rho=0.0, seed=9)
    ds = generate_synthetic(spec)
    train, test = ds.take(np.arange(800)), ds.take(np.arange(800, 1200))
    data = train.to_selection_data()
    d_s = data.subset(np.flatnonzero(data.s == 1))
    cfg = FitConfig(max_iters=400)
    out, plan = run_biascorr_star(d_s, test.x_sel, train.n, cfg=cfg)
    ref = fit_greene(d_s, cfg)
    acc_star = np.mean(out.h_params.predict(test.x_pred) == test.y)
    acc_ref = np.mean(ref.params.predict(test.x_pred) == test.y)
    assert abs(acc_star - acc_ref) < 0.05
