"""Simulated maximum likelihood for the logistic sample-selection model.

The selection equation is ``z = gamma . x_sel + u_s`` with ``s = 1[z > 0]``
and the outcome is logistic with noise ``sigma * eps``; ``u_s`` and ``eps``
are standard normals with correlation ``rho``. The per-sample likelihood
integrates over ``eps``; it is replaced here by an average over ``R`` frozen
standard-normal draws per sample. Selection values may be soft (any value in
[0, 1]), which is how the modified training set of BiasCorr is scored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .core import FitConfig, OptimizationError, relative_change_pct, sgd_step, std_normal_cdf

SIGMA_MIN = 1e-6
RHO_MAX = 1.0 - 1e-6
LIK_FLOOR = 1e-300
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GreeneParams:
    beta: np.ndarray
    gamma: np.ndarray
    sigma: float
    rho: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.sigma = float(self.sigma)
        self.rho = float(self.rho)

    @classmethod
    def zeros(cls, dim_pred, dim_sel, sigma=0.01, rho=0.01):
        return cls(np.zeros(dim_pred), np.zeros(dim_sel), sigma, rho).projected()

    def projected(self):
        """Copy with sigma and rho clamped into their admissible ranges."""
        return GreeneParams(self.beta.copy(), self.gamma.copy(),
                            max(self.sigma, SIGMA_MIN), min(max(self.rho, -RHO_MAX), RHO_MAX))

    def to_vector(self):
        return np.r_[self.beta, self.gamma, self.sigma, self.rho]

    @classmethod
    def from_vector(cls, vec, dim_pred):
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:dim_pred], vec[dim_pred:-2], vec[-2], vec[-1])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.to_vector())))

    def predict_proba(self, x_pred):
        """Noise-free outcome probability P(y=1 | x_pred) used by the classifier h."""
        return special.expit(np.asarray(x_pred, dtype=float) @ self.beta)

    def predict(self, x_pred):
        return (self.predict_proba(x_pred) > 0.5).astype(int)

    def to_dict(self):
        return {"beta": self.beta.tolist(), "gamma": self.gamma.tolist(),
                "sigma": self.sigma, "rho": self.rho}

    @classmethod
    def from_dict(cls, d):
        return cls(d["beta"], d["gamma"], d["sigma"], d["rho"])


@dataclass
class GreeneGradient:
    beta: np.ndarray
    gamma: np.ndarray
    sigma: float
    rho: float

    def to_vector(self):
        return np.r_[self.beta, self.gamma, self.sigma, self.rho]


@dataclass(frozen=True)
class SelectionSample:
    x_sel: np.ndarray
    x_pred: np.ndarray
    label: int | None
    selection: float


@dataclass
class SelectionData:
    """Column-oriented training set for the selection model.

    ``x_sel`` holds the selection features; the prediction features are the
    columns ``pred_idx`` of ``x_sel``. ``y`` is NaN where the label is
    missing, and ``s`` is the (possibly soft) selection value.
    """

    x_sel: np.ndarray
    pred_idx: np.ndarray
    y: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        # one memory layout for every set, so BLAS reductions round identically
        self.x_sel = np.ascontiguousarray(self.x_sel, dtype=float)
        self.pred_idx = np.asarray(self.pred_idx, dtype=int)
        self.y = np.asarray(self.y, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        n = self.x_sel.shape[0]
        if self.x_sel.ndim != 2:
            raise ValueError("x_sel must be a 2-D array")
        if self.y.shape != (n,) or self.s.shape != (n,):
            raise ValueError("y and s must have one entry per sample")
        if self.pred_idx.ndim != 1 or len(np.unique(self.pred_idx)) != len(self.pred_idx):
            raise ValueError("pred_idx must list distinct columns")
        if len(self.pred_idx) and (self.pred_idx.min() < 0 or self.pred_idx.max() >= self.x_sel.shape[1]):
            raise ValueError("prediction features must be a subset of the selection features")
        if not np.all(np.isfinite(self.x_sel)):
            raise ValueError("features must be finite")
        if np.any((self.s < 0) | (self.s > 1)):
            raise ValueError("selection values must lie in [0, 1]")
        missing = np.isnan(self.y)
        if np.any(missing & (self.s > 0)):
            i = int(np.flatnonzero(missing & (self.s > 0))[0])
            raise ValueError(f"sample {i} has selection > 0 but no label")
        if np.any(~missing & (self.y != 0) & (self.y != 1)):
            raise ValueError("labels must be binary")

    @property
    def n(self):
        return self.x_sel.shape[0]

    @property
    def x_pred(self):
        return self.x_sel[:, self.pred_idx]

    @property
    def dim_sel(self):
        return self.x_sel.shape[1]

    @property
    def dim_pred(self):
        return len(self.pred_idx)

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        y = self.y[i]
        return SelectionSample(self.x_sel[i], self.x_sel[i, self.pred_idx],
                               None if np.isnan(y) else int(y), float(self.s[i]))

    def subset(self, idx):
        idx = np.asarray(idx)
        return SelectionData(self.x_sel[idx], self.pred_idx, self.y[idx], self.s[idx])

    @classmethod
    def from_samples(cls, samples, pred_idx):
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        x = np.vstack([np.asarray(smp.x_sel, dtype=float) for smp in samples])
        y = np.array([np.nan if smp.label is None else smp.label for smp in samples], dtype=float)
        s = np.array([smp.selection for smp in samples], dtype=float)
        data = cls(x, pred_idx, y, s)
        for i, smp in enumerate(samples):
            if not np.array_equal(np.asarray(smp.x_pred, dtype=float), x[i, data.pred_idx]):
                raise ValueError(f"sample {i}: x_pred is not the declared sub-vector of x_sel")
        return data


@dataclass(frozen=True)
class DrawMatrix:
    draws: np.ndarray
    seed: int

    @classmethod
    def generate(cls, n, R, seed):
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((n, R)), seed)

    @property
    def shape(self):
        return self.draws.shape

    @property
    def R(self):
        return self.draws.shape[1]


def check_draw_count(n, R):
    if not R > math.sqrt(n):
        raise ValueError(
            f"R={R} random draws must exceed sqrt(n)={math.sqrt(n):.2f} "
            "for the simulated likelihood to be asymptotically exact")


def selection_prob_given_eps(gamma, x_sel, rho, eps, s):
    """Phi[(2s - 1) (gamma . x_sel + rho eps) / sqrt(1 - rho^2)]."""
    if not (np.isfinite(rho) and np.isfinite(eps) and np.isfinite(s)):
        raise ValueError("rho, eps and s must be finite")
    if not 0.0 <= s <= 1.0:
        raise ValueError("selection value must lie in [0, 1]")
    rho = min(max(float(rho), -RHO_MAX), RHO_MAX)
    index = float(np.asarray(gamma, dtype=float) @ np.asarray(x_sel, dtype=float))
    return std_normal_cdf((2.0 * s - 1.0) * (index + rho * eps) / math.sqrt(1.0 - rho * rho))


def _integrand(params, data, eps):
    """Per-(sample, node) pieces of [(1-s) + s f(y|x,eps)] * P(s|x,eps).

    ``eps`` is (n, K). Returns the weight ``w``, the selection probability
    ``P`` and intermediates needed for the gradient.
    """
    s = data.s[:, None]
    sign = 2.0 * s - 1.0
    k = 1.0 / math.sqrt(1.0 - params.rho * params.rho)
    c = data.x_sel @ params.gamma
    a = sign * (c[:, None] + params.rho * eps) * k
    P = special.ndtr(a)
    ysign = 2.0 * np.nan_to_num(data.y, nan=0.0)[:, None] - 1.0
    zb = data.x_pred @ params.beta
    f = special.expit(ysign * (zb[:, None] + params.sigma * eps))
    w = (1.0 - s) + s * f
    return w, P, a, f, ysign, sign, c, k


def per_sample_sim_loglik(params, data, eps):
    w, P, *_ = _integrand(params, data, eps)
    avg = np.mean(w * P, axis=1)
    return np.log(np.maximum(avg, LIK_FLOOR))


def sample_sim_likelihood(params, sample, draws_row):
    """Simulated log-likelihood of one sample over a row of R draws."""
    if sample.selection > 0 and sample.label is None:
        raise ValueError("selection > 0 requires a label")
    eps = np.asarray(draws_row, dtype=float)
    s = float(sample.selection)
    rho = params.rho
    c = float(params.gamma @ np.asarray(sample.x_sel, dtype=float))
    P = special.ndtr((2.0 * s - 1.0) * (c + rho * eps) / math.sqrt(1.0 - rho * rho))
    if sample.label is None:
        w = np.ones_like(eps)
    else:
        zb = float(params.beta @ np.asarray(sample.x_pred, dtype=float))
        f = special.expit((2.0 * sample.label - 1.0) * (zb + params.sigma * eps))
        w = (1.0 - s) + s * f
    return math.log(max(float(np.mean(w * P)), LIK_FLOOR))


def total_loss(params, data, draws):
    """Simulated negative mean log-likelihood over the dataset."""
    eps = draws.draws if isinstance(draws, DrawMatrix) else np.asarray(draws, dtype=float)
    if eps.shape[0] != data.n:
        raise ValueError(f"draws have {eps.shape[0]} rows for {data.n} samples")
    check_draw_count(data.n, eps.shape[1])
    return float(-np.mean(per_sample_sim_loglik(params, data, eps)))


def loss_and_gradient(params, data, draws):
    """Simulated loss and its exact derivative w.r.t. (beta, gamma, sigma, rho)."""
    eps = draws.draws if isinstance(draws, DrawMatrix) else np.asarray(draws, dtype=float)
    if eps.shape[0] != data.n:
        raise ValueError(f"draws have {eps.shape[0]} rows for {data.n} samples")
    check_draw_count(data.n, eps.shape[1])
    w, P, a, f, ysign, sign, c, k = _integrand(params, data, eps)
    s = data.s[:, None]
    avg = np.mean(w * P, axis=1)
    floored = avg < LIK_FLOOR
    inv = np.where(floored, 0.0, 1.0 / np.maximum(avg, LIK_FLOOR))
    loss = float(-np.mean(np.log(np.maximum(avg, LIK_FLOOR))))
    if not np.isfinite(loss):
        raise OptimizationError("non-finite loss")

    # d w / d score = s (2y-1) f (1-f), score = beta.x_pred + sigma eps
    dw = P * s * ysign * f * (1.0 - f)
    phi_a = np.exp(-0.5 * a * a - _LOG_SQRT_2PI)
    dP = w * phi_a * sign  # times d index / d param below
    n = data.n
    g_beta = -(data.x_pred.T @ (np.mean(dw, axis=1) * inv)) / n
    g_sigma = -np.sum(np.mean(dw * eps, axis=1) * inv) / n
    g_gamma = -(data.x_sel.T @ (np.mean(dP, axis=1) * k * inv)) / n
    drho = (eps + params.rho * c[:, None]) * k ** 3
    g_rho = -np.sum(np.mean(dP * drho, axis=1) * inv) / n
    grad = GreeneGradient(g_beta, g_gamma, float(g_sigma), float(g_rho))
    vec = grad.to_vector()
    if not np.all(np.isfinite(vec)):
        per_sample = np.mean(dw, axis=1) * inv
        bad = np.flatnonzero(~np.isfinite(per_sample))
        raise OptimizationError(f"non-finite gradient (samples {bad[:10].tolist()})")
    return loss, grad


def loss_gradient(params, data, draws):
    return loss_and_gradient(params, data, draws)[1]


def exact_loss_quadrature(params, data, nodes=40):
    """Negative mean log-likelihood with the eps-integral done by Gauss-Hermite.

    Written independently of the simulation path so it can serve as its
    oracle: int g(eps) phi(eps) d eps = pi^{-1/2} sum_k w_k g(sqrt(2) t_k).
    """
    if nodes < 20:
        raise ValueError("use at least 20 quadrature nodes")
    t, wts = np.polynomial.hermite.hermgauss(nodes)
    eps = math.sqrt(2.0) * t
    rho = params.rho
    scale = math.sqrt(1.0 - rho * rho)
    total = 0.0
    for i in range(data.n):
        s_i = data.s[i]
        idx = data.x_sel[i] @ params.gamma
        p_sel = special.ndtr((2.0 * s_i - 1.0) * (idx + rho * eps) / scale)
        if np.isnan(data.y[i]):
            weight = np.ones_like(eps)
        else:
            z = data.x_pred[i] @ params.beta + params.sigma * eps
            p1 = 1.0 / (1.0 + np.exp(-z))
            f_y = p1 if data.y[i] == 1 else 1.0 - p1
            weight = (1.0 - s_i) + s_i * f_y
        lik = _INV_SQRT_PI * np.sum(wts * weight * p_sel)
        total += math.log(max(lik, LIK_FLOOR))
    return -total / data.n


@dataclass
class GreeneFit:
    params: GreeneParams
    loss_trace: list = field(repr=False)
    n_iter: int
    converged: bool
    draws: DrawMatrix = field(repr=False)

    @property
    def final_loss(self):
        return self.loss_trace[-1]


class GreeneDivergenceError(OptimizationError):
    pass


def fit_greene(data, cfg=None, draws=None, init=None):
    """Minimize the simulated loss by full-batch projected gradient descent.

    Draws are generated once from ``cfg.seed`` (unless supplied) and held
    fixed. ``beta`` and ``gamma`` start at zero, ``sigma`` and ``rho`` at the
    configured initial values; both are clamped after every step. Weight
    decay is applied to ``beta`` and ``gamma`` only.
    """
    cfg = cfg or FitConfig()
    if data.n == 0:
        raise ValueError("cannot fit on an empty dataset")
    check_draw_count(data.n, cfg.R)
    if draws is None:
        draws = DrawMatrix.generate(data.n, cfg.R, cfg.seed)
    elif draws.shape[0] != data.n:
        raise ValueError("draw matrix does not match the dataset")
    params = init.projected() if init is not None else GreeneParams.zeros(
        data.dim_pred, data.dim_sel, cfg.init_sigma, cfg.init_rho)
    mask = np.r_[np.ones(data.dim_pred + data.dim_sel), 0.0, 0.0]
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        try:
            loss, grad = loss_and_gradient(params, data, draws)
        except OptimizationError as exc:
            raise GreeneDivergenceError(str(exc), state=params, iteration=it) from exc
        if trace and relative_change_pct(trace[-1], loss) < cfg.stop_pct:
            trace.append(loss)
            converged = True
            break
        trace.append(loss)
        vec = sgd_step(params.to_vector(), grad.to_vector(), cfg, mask)
        nxt = GreeneParams.from_vector(vec, data.dim_pred).projected()
        if not nxt.is_finite():
            raise GreeneDivergenceError("parameters became non-finite", state=params, iteration=it)
        params = nxt
    return GreeneFit(params, trace, it, converged, draws)
