"""Closed-form loss-estimator biases for Greene's method and BiasCorr.

Everything here runs on *oracle* quantities: true selection probabilities
``p(s_i)``, true label likelihoods ``f(y_i|x)`` and the draw-averaged
selection/outcome expectations of the estimated models. On real data the
true quantities are unknown, so only ``eta``, ``s_bar`` and the threshold
``1 / (2 - s_bar)`` can be reported there.

Bias is ``|L* - E[L_hat]|`` with ``L* = -mean(log f(y_i|x))``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class OracleModels:
    """Per-sample oracle vectors.

    ``p_hat`` / ``f_hat`` are the estimated selection and outcome
    expectations used by Greene's loss; ``p_hat_prime`` / ``f_hat_prime``
    are the BiasCorr counterparts (for the modified selection values and
    pseudolabels). The primed vectors default to the unprimed ones.
    """

    p_s: np.ndarray
    p_hat: np.ndarray
    f_true: np.ndarray
    f_hat: np.ndarray
    p_hat_prime: np.ndarray | None = None
    f_hat_prime: np.ndarray | None = None

    def __post_init__(self):
        self.p_s = np.asarray(self.p_s, dtype=float)
        self.p_hat = np.asarray(self.p_hat, dtype=float)
        self.f_true = np.asarray(self.f_true, dtype=float)
        self.f_hat = np.asarray(self.f_hat, dtype=float)
        self.p_hat_prime = self.p_hat if self.p_hat_prime is None else np.asarray(self.p_hat_prime, dtype=float)
        self.f_hat_prime = self.f_hat if self.f_hat_prime is None else np.asarray(self.f_hat_prime, dtype=float)
        n = self.p_s.shape
        for name in ("p_hat", "f_true", "f_hat", "p_hat_prime", "f_hat_prime"):
            if getattr(self, name).shape != n:
                raise ValueError(f"{name} must have the same length as p_s")
        for name in ("p_s", "f_true"):
            v = getattr(self, name)
            if np.any(~np.isfinite(v)) or np.any(v <= 0) or np.any(v > 1):
                raise ValueError(f"{name} entries must lie in (0, 1]")

    @property
    def n(self):
        return self.p_s.shape[0]

    @classmethod
    def perfect(cls, p_s, f_true, s_bar, eta, f_hat=None):
        """Oracle with no estimation error in either selection model.

        The estimated selection expectation equals ``p(s_i)`` for Greene's
        loss and ``p(s_i) + s_bar * eta`` (the expected soft selection value)
        for the BiasCorr loss; both losses share one outcome model.
        """
        p_s = np.asarray(p_s, dtype=float)
        f_true = np.asarray(f_true, dtype=float)
        f_hat = f_true if f_hat is None else np.asarray(f_hat, dtype=float)
        over = int(np.sum(p_s + s_bar * eta > 1.0))
        if over:
            raise ValueError(f"perfect BiasCorr oracle needs p(s_i) + s_bar*eta <= 1; "
                             f"{over} of {p_s.shape[0]} samples exceed it")
        return cls(p_s, p_s, f_true, f_hat, p_hat_prime=p_s + s_bar * eta, f_hat_prime=f_hat)


@dataclass
class BiasReport:
    eta: float
    s_bar: float
    threshold: float
    bias_greene: float | None = None
    bias_biascorr: float | None = None
    term1: float | None = None
    term2: float | None = None
    diff_lower_bound: float | None = None
    premise_holds: bool | None = None
    biascorr_lower: bool | None = None

    def to_dict(self):
        return asdict(self)


def optimal_loss(f_true, n=None):
    """Fully-observed loss L* = -(1/n) sum log f(y_i|x)."""
    f = np.asarray(f_true, dtype=float)
    if np.any(f <= 0) or np.any(f > 1):
        raise ValueError("likelihood entries must lie in (0, 1]")
    n = len(f) if n is None else n
    return float(-np.sum(np.log(f)) / n)


def _log_ratio_mean(f, denom):
    bad = np.flatnonzero(~(denom > 0))
    if bad.size:
        raise ValueError(f"non-positive denominator at sample index {int(bad[0])}")
    return float(np.mean(np.log(f / denom)))


def greene_denominator(oracle):
    return oracle.p_hat + oracle.p_s * oracle.p_hat * (oracle.f_hat - 1.0)


def biascorr_denominator(oracle, s_bar, eta):
    q = oracle.p_s + s_bar * eta
    return oracle.p_hat_prime + q * oracle.p_hat_prime * (oracle.f_hat_prime - 1.0)


def greene_bias(oracle):
    return abs(_log_ratio_mean(oracle.f_true, greene_denominator(oracle)))


def biascorr_bias(oracle, s_bar, eta):
    return abs(_log_ratio_mean(oracle.f_true, biascorr_denominator(oracle, s_bar, eta)))


def signed_excess(oracle, s_bar=None, eta=None):
    """E[L_hat] - L* without the absolute value (Greene if s_bar is None)."""
    if s_bar is None:
        return _log_ratio_mean(oracle.f_true, greene_denominator(oracle))
    return _log_ratio_mean(oracle.f_true, biascorr_denominator(oracle, s_bar, eta))


def diff_terms(oracle, s_bar, eta):
    """The two terms of the lower bound on Bias(Greene) - Bias(BiasCorr)."""
    se = s_bar * eta
    term1 = 1.0 - se - np.mean(2.0 * oracle.p_s)
    term2 = float(np.mean(oracle.f_hat * (2.0 * oracle.p_s + se)))
    return float(term1), term2, float(se * (term1 + term2))


def eta_threshold(s_bar):
    if not 0.0 <= s_bar < 1.0:
        raise ValueError("s_bar must lie in [0, 1)")
    return 1.0 / (2.0 - s_bar)


def analyze(oracle, s_bar, eta):
    """Full report for one oracle instance."""
    thr = eta_threshold(s_bar)
    bg = greene_bias(oracle)
    bc = biascorr_bias(oracle, s_bar, eta)
    t1, t2, lb = diff_terms(oracle, s_bar, eta)
    premise = signed_excess(oracle) >= 0 and signed_excess(oracle, s_bar, eta) >= 0
    return BiasReport(eta, s_bar, thr, bg, bc, t1, t2, lb, premise, bc < bg)


def monte_carlo_likelihoods(oracle, s_bar=None, n_masks=100_000, seed=0, chunk=10_000):
    """Average per-sample estimated likelihood over random maskings.

    Each realization draws ``s_i ~ Bernoulli(p(s_i))`` independently. For
    Greene the per-sample likelihood is ``(1-s) p_hat + s f_hat p_hat``;
    with ``s_bar`` given, unlabeled samples get ``s' = s_bar`` and the
    BiasCorr likelihood ``(1-s') p_hat' + s' f_hat' p_hat'``. Returns the
    realization average of the likelihood and of its logarithm.
    """
    rng = np.random.default_rng(seed)
    n = oracle.n
    lik_sum = np.zeros(n)
    log_sum = np.zeros(n)
    done = 0
    while done < n_masks:
        k = min(chunk, n_masks - done)
        s = (rng.random((k, n)) < oracle.p_s).astype(float)
        if s_bar is None:
            lik = (1.0 - s) * oracle.p_hat + s * oracle.f_hat * oracle.p_hat
        else:
            sp = s + (1.0 - s) * s_bar
            lik = (1.0 - sp) * oracle.p_hat_prime + sp * oracle.f_hat_prime * oracle.p_hat_prime
        lik_sum += lik.sum(axis=0)
        log_sum += np.log(lik).sum(axis=0)
        done += k
    return lik_sum / n_masks, log_sum / n_masks


def monte_carlo_bias(oracle, s_bar=None, n_masks=100_000, seed=0):
    """Bias computed from simulated maskings, with the expectation taken
    on the per-sample likelihood (before the logarithm)."""
    lik, _ = monte_carlo_likelihoods(oracle, s_bar, n_masks, seed)
    return abs(float(np.mean(np.log(oracle.f_true / lik))))


def monte_carlo_loss_bias(oracle, s_bar=None, n_masks=100_000, seed=0):
    """Bias |L* - E[L_hat]| with the expectation of the loss itself."""
    _, loglik = monte_carlo_likelihoods(oracle, s_bar, n_masks, seed)
    return abs(float(np.mean(np.log(oracle.f_true) - loglik)))
