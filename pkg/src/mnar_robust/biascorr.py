"""BiasCorr: pseudolabels plus a soft selection value for unlabeled samples.

A selection classifier ``g_s`` (trained on every sample to predict ``s``)
gives the soft selection value ``s_bar`` as its mean predicted probability
over the unlabeled samples; a label classifier ``g_y`` (trained on labeled
samples only) gives their pseudolabels. The robust classifier ``h`` is the
Greene fit on the modified set, where unlabeled samples carry
``(y', s') = (pseudolabel, s_bar)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import FitConfig, PredictorParams, fit_binary_classifier
from .greene import GreeneFit, GreeneParams, SelectionData, fit_greene


class NoUnlabeledWarning(UserWarning):
    pass


@dataclass
class BiasCorrOutput:
    h_params: GreeneParams
    s_bar: float
    pseudolabels: np.ndarray
    g_s: PredictorParams | None
    g_y: PredictorParams | None
    modified_set_size: int
    fit: GreeneFit = field(repr=False)
    modified: SelectionData = field(repr=False)

    @property
    def converged(self):
        fits = [self.fit.converged]
        fits += [g.converged for g in (self.g_s, self.g_y) if g is not None and g.status == "ok"]
        return all(fits)


def estimate_soft_selection(g_s, x_sel_unlabeled):
    """Mean predicted selection probability over the unlabeled samples."""
    x = np.asarray(x_sel_unlabeled, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("no unlabeled samples: nothing to correct")
    return float(np.mean(g_s.predict_proba(x)))


def assign_pseudolabels(g_y, x_pred_unlabeled):
    """1 where g_y's probability is strictly above 0.5."""
    x = np.asarray(x_pred_unlabeled, dtype=float)
    if x.shape[0] == 0:
        return np.zeros(0, dtype=int)
    return (g_y.predict_proba(x) > 0.5).astype(int)


def build_modified_training_set(d_s, d_u, s_bar, pseudolabels):
    """Labeled samples keep (y, 1); unlabeled get (pseudolabel, s_bar). D_s first."""
    pseudolabels = np.asarray(pseudolabels)
    if pseudolabels.shape != (d_u.n,):
        raise ValueError(f"{pseudolabels.shape[0] if pseudolabels.ndim else 0} pseudolabels for {d_u.n} unlabeled samples")
    if not 0.0 <= s_bar <= 1.0:
        raise ValueError("s_bar must lie in [0, 1]")
    if np.any(np.isnan(d_s.y)):
        raise ValueError("labeled set contains missing labels")
    return SelectionData(
        np.vstack([d_s.x_sel, d_u.x_sel]), d_s.pred_idx,
        np.r_[d_s.y, pseudolabels.astype(float)],
        np.r_[np.ones(d_s.n), np.full(d_u.n, float(s_bar))])


def split_labeled(d_tr):
    labeled = d_tr.s == 1
    unlabeled = d_tr.s == 0
    if not np.all(labeled | unlabeled):
        raise ValueError("the biased training set must have selection values in {0, 1}")
    return d_tr.subset(np.flatnonzero(labeled)), d_tr.subset(np.flatnonzero(unlabeled))


def run_biascorr(d_tr, g_s_kind="probit", g_y_kind="logit", cfg=None, s_bar=None, classifier_cfg=None):
    """Run BiasCorr on a biased training set (``s`` in {0, 1}).

    Passing ``s_bar`` fixes the soft selection value and skips ``g_s``.
    ``classifier_cfg`` (defaults to ``cfg``) configures ``g_s`` and ``g_y``.
    The modified set handed to Greene's fit keeps the row order of ``d_tr``.
    """
    cfg = cfg or FitConfig()
    classifier_cfg = classifier_cfg or cfg
    d_s, d_u = split_labeled(d_tr)
    if d_s.n == 0:
        raise ValueError("BiasCorr needs at least one labeled sample")

    g_s = None
    g_y = None
    if d_u.n == 0:
        warnings.warn("no unlabeled samples; BiasCorr reduces to Greene's method on D_s",
                      NoUnlabeledWarning, stacklevel=2)
        fit = fit_greene(d_s, cfg)
        return BiasCorrOutput(fit.params, 0.0 if s_bar is None else float(s_bar), np.zeros(0, dtype=int),
                              None, None, d_s.n, fit, d_s)

    if s_bar is None:
        g_s = fit_binary_classifier(g_s_kind, d_tr.x_sel, d_tr.s, classifier_cfg)
        s_bar = estimate_soft_selection(g_s, d_u.x_sel)
    g_y = fit_binary_classifier(g_y_kind, d_s.x_pred, d_s.y, classifier_cfg)
    pseudo = assign_pseudolabels(g_y, d_u.x_pred)
    modified = build_modified_training_set(d_s, d_u, s_bar, pseudo)
    # back to D_tr's row order so each sample keeps the draw row Greene's fit gives it
    order = np.r_[np.flatnonzero(d_tr.s == 1), np.flatnonzero(d_tr.s == 0)]
    modified = modified.subset(np.argsort(order, kind="stable"))
    fit = fit_greene(modified, cfg)
    return BiasCorrOutput(fit.params, float(s_bar), pseudo, g_s, g_y, modified.n, fit, modified)
