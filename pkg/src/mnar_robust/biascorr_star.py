"""BiasCorr*: augment a biased labeled set with samples from an unbiased pool.

``n`` samples are drawn from the unlabeled pool; for every distinct sample
``t`` seen ``b_t`` times in the draw and ``a_t`` times in the labeled set,
``b_t - a_t`` copies are added as unlabeled until the augmented set has
``n`` samples. BiasCorr then runs on the augmented set.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .biascorr import run_biascorr
from .greene import SelectionData

KEY_DECIMALS = 6


class AugmentationShortfall(UserWarning):
    pass


def sample_key(x, decimals=KEY_DECIMALS):
    """Hashable identity of a sample: its feature vector rounded to 6 decimals."""
    r = np.round(np.asarray(x, dtype=float), decimals) + 0.0  # folds -0.0 into 0.0
    return tuple(r.tolist())


@dataclass
class AugmentationPlan:
    n: int
    m: int
    drawn_idx: np.ndarray  # draw -> row of the pool
    added: np.ndarray  # positions within the draw
    per_distinct_counts: dict = field(repr=False)

    @property
    def target(self):
        return self.n - self.m

    @property
    def shortfall(self):
        return len(self.added) < self.target


def draw_target_samples(pool_size, n, seed):
    """Indices of ``n`` uniform draws from a pool (with replacement only when the pool is smaller)."""
    if pool_size <= 0:
        raise ValueError("the unlabeled pool is empty")
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if pool_size >= n:
        return rng.permutation(pool_size)[:n]
    return rng.integers(0, pool_size, size=n)


def empirical_freq_augment(d_s_x, d_n_x, n):
    """Choose the samples of the draw ``d_n_x`` that join the unlabeled set.

    Distinct samples are visited in lexicographic order of their rounded
    feature vectors; within a group the earliest draws are taken first, and
    the final group is truncated so exactly ``n - m`` samples are added.
    """
    d_s_x = np.asarray(d_s_x, dtype=float)
    d_n_x = np.asarray(d_n_x, dtype=float)
    m = d_s_x.shape[0]
    if not m < n:
        raise ValueError(f"need m < n (m={m}, n={n})")
    target = n - m
    a = Counter(sample_key(x) for x in d_s_x)
    groups = {}
    for pos, x in enumerate(d_n_x):
        groups.setdefault(sample_key(x), []).append(pos)
    counts = {t: (a.get(t, 0), len(pos)) for t, pos in groups.items()}
    added = []
    for t in sorted(groups):
        a_t, b_t = counts[t]
        if b_t > a_t:
            added.extend(groups[t][: min(b_t - a_t, target - len(added))])
        if len(added) == target:
            break
    plan = AugmentationPlan(n, m, np.arange(len(d_n_x)), np.array(added, dtype=int), counts)
    if plan.shortfall:
        warnings.warn(f"augmentation added {len(added)} of {target} samples", AugmentationShortfall,
                      stacklevel=2)
    return plan


def build_augmented_set(d_s, pool_x_sel, n, seed=0):
    """D_aug = D_s (s=1) followed by the chosen pool samples (s=0, no label)."""
    drawn = draw_target_samples(pool_x_sel.shape[0], n, seed)
    d_n_x = np.asarray(pool_x_sel)[drawn]
    plan = empirical_freq_augment(d_s.x_sel, d_n_x, n)
    plan.drawn_idx = drawn
    x_u = d_n_x[plan.added]
    k = x_u.shape[0]
    aug = SelectionData(np.vstack([d_s.x_sel, x_u]), d_s.pred_idx,
                        np.r_[d_s.y, np.full(k, np.nan)], np.r_[np.ones(d_s.n), np.zeros(k)])
    return aug, plan


def run_biascorr_star(d_s, pool_x_sel, n, g_s_kind="probit", g_y_kind="logit", cfg=None, seed=None,
                      classifier_cfg=None):
    """Augment ``d_s`` from the pool and run BiasCorr on the result."""
    if np.any(np.isnan(d_s.y)):
        raise ValueError("the labeled set contains missing labels")
    d_s = SelectionData(d_s.x_sel, d_s.pred_idx, d_s.y, np.ones(d_s.n))
    seed = (cfg.seed if cfg is not None else 0) if seed is None else seed
    aug, plan = build_augmented_set(d_s, pool_x_sel, n, seed)
    out = run_biascorr(aug, g_s_kind, g_y_kind, cfg, classifier_cfg=classifier_cfg)
    return out, plan


def selection_estimate_error_bound(a_prime, p0_n, delta):
    """sqrt((ln(2 a') + ln(1/delta)) / (p0 n)), natural logarithms."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if not a_prime >= 1:
        raise ValueError("a_prime must be >= 1")
    if not p0_n > 0:
        raise ValueError("p0_n must be positive")
    return math.sqrt((math.log(2 * a_prime) + math.log(1.0 / delta)) / p0_n)
