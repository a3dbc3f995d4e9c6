"""Numerical primitives shared by every fitting routine.

Standard-normal functions, the three binary predictor families (logit,
probit, one-hidden-layer MLP) and the full-batch projected gradient step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

SQRT_2PI = math.sqrt(2.0 * math.pi)
MLP_HIDDEN = 64
PREDICTOR_KINDS = ("logit", "probit", "mlp")


class OptimizationError(RuntimeError):
    """Raised when a fit produces a non-finite gradient or loss."""

    def __init__(self, message, state=None, iteration=None):
        super().__init__(message)
        self.state = state
        self.iteration = iteration


class DegenerateFitWarning(UserWarning):
    pass


def _check_finite(z, name="z"):
    arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def std_normal_cdf(z):
    """Standard normal CDF, Phi(z). Accepts scalars or arrays."""
    arr = _check_finite(z)
    out = special.ndtr(arr)
    return float(out) if out.ndim == 0 else out


def std_normal_pdf(z):
    """Standard normal density, exp(-z^2/2)/sqrt(2 pi)."""
    arr = _check_finite(z)
    out = np.exp(-0.5 * arr * arr) / SQRT_2PI
    return float(out) if out.ndim == 0 else out


def sigmoid(z):
    return special.expit(z)


def logistic_predict(beta, x, noise=0.0):
    """P(y=1 | x, noise) = exp(beta.x + noise) / (1 + exp(beta.x + noise))."""
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    if beta.shape != x.shape:
        raise ValueError(f"dimension mismatch: beta {beta.shape} vs x {x.shape}")
    if not np.isfinite(noise):
        raise ValueError("noise must be finite")
    return float(special.expit(float(beta @ x) + noise))


@dataclass(frozen=True)
class FitConfig:
    """Optimizer settings shared by the classifier and Greene fits.

    ``stop_pct`` is the relative loss change, in percent, between
    consecutive iterations below which training stops.
    """

    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    stop_pct: float = 0.05
    max_iters: int = 5000
    seed: int = 0
    R: int = 200
    init_sigma: float = 0.01
    init_rho: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not self.stop_pct > 0:
            raise ValueError("stop_pct must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    def with_(self, **changes):
        return replace(self, **changes)


def sgd_step(params, grad, cfg, decay_mask=None):
    """One plain gradient step with L2 weight decay.

    ``decay_mask`` selects the coordinates that are decayed (all by default).
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise ValueError(f"dimension mismatch: params {params.shape} vs grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise OptimizationError(f"non-finite gradient at coordinates {bad.tolist()}", state=params.copy())
    decay = cfg.weight_decay * params
    if decay_mask is not None:
        decay = decay * decay_mask
    return params - cfg.learning_rate * (grad + decay)


def relative_change_pct(prev, cur):
    if prev == 0.0:
        return 0.0 if cur == 0.0 else math.inf
    return abs(prev - cur) / abs(prev) * 100.0


@dataclass
class PredictorParams:
    """Parameters of a fitted binary predictor.

    For ``mlp`` the network is ``sigmoid(relu(X @ hidden_weights + hidden_bias) @ weights + bias)``.
    """

    kind: str
    weights: np.ndarray
    bias: float = 0.0
    hidden_weights: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None
    status: str = "ok"
    n_iter: int = 0
    converged: bool = True
    loss_trace: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.kind == "mlp":
            if self.hidden_weights is None or self.hidden_bias is None:
                raise ValueError("mlp requires hidden layer parameters")
            self.hidden_weights = np.asarray(self.hidden_weights, dtype=float)
            self.hidden_bias = np.asarray(self.hidden_bias, dtype=float)
            if self.hidden_weights.shape[1] != self.weights.shape[0]:
                raise ValueError("hidden layer width does not match output weights")

    @property
    def input_dim(self):
        if self.kind == "mlp":
            return self.hidden_weights.shape[0]
        return self.weights.shape[0]

    def decision_function(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected (n, {self.input_dim}) features, got {X.shape}")
        if self.kind == "mlp":
            hidden = np.maximum(X @ self.hidden_weights + self.hidden_bias, 0.0)
            return hidden @ self.weights + self.bias
        return X @ self.weights + self.bias

    def predict_proba(self, X):
        z = self.decision_function(X)
        if self.kind == "probit":
            return special.ndtr(z)
        return special.expit(z)

    def predict(self, X):
        return (self.predict_proba(X) > 0.5).astype(int)

    def to_dict(self):
        out = {"kind": self.kind, "weights": self.weights.tolist(), "bias": self.bias,
               "status": self.status, "n_iter": self.n_iter, "converged": self.converged}
        if self.kind == "mlp":
            out["hidden_weights"] = self.hidden_weights.tolist()
            out["hidden_bias"] = self.hidden_bias.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], weights=np.asarray(d["weights"]), bias=float(d["bias"]),
                   hidden_weights=None if d.get("hidden_weights") is None else np.asarray(d["hidden_weights"]),
                   hidden_bias=None if d.get("hidden_bias") is None else np.asarray(d["hidden_bias"]),
                   status=d.get("status", "ok"), n_iter=d.get("n_iter", 0),
                   converged=d.get("converged", True))


# --- Bernoulli negative log-likelihoods and their derivative w.r.t. the score

def _nll_and_dscore(kind, z, t):
    """Mean NLL and per-sample d(NLL_i)/d(z_i) for link ``kind``."""
    if kind == "probit":
        log_p1 = special.log_ndtr(z)
        log_p0 = special.log_ndtr(-z)
        nll = -np.mean(t * log_p1 + (1.0 - t) * log_p0)
        log_phi = -0.5 * z * z - math.log(SQRT_2PI)
        # phi/Phi ratios in log space stay finite in both tails
        dz = -t * np.exp(log_phi - log_p1) + (1.0 - t) * np.exp(log_phi - log_p0)
        return nll, dz
    # logistic link: log(1 + e^z) - t z
    nll = np.mean(np.logaddexp(0.0, z) - t * z)
    dz = special.expit(z) - t
    return nll, dz


def _constant_predictor(kind, dim, target, rng):
    p = 1.0 - 1e-6 if target == 1 else 1e-6
    bias = float(special.ndtri(p)) if kind == "probit" else float(special.logit(p))
    if kind == "mlp":
        return PredictorParams(kind, np.zeros(MLP_HIDDEN), bias,
                               hidden_weights=np.zeros((dim, MLP_HIDDEN)),
                               hidden_bias=np.zeros(MLP_HIDDEN), status="degenerate")
    return PredictorParams(kind, np.zeros(dim), bias, status="degenerate")


def fit_binary_classifier(kind, features, targets, cfg=None):
    """Fit a logit, probit or MLP classifier by full-batch gradient descent.

    Weights start at zero for the linear kinds and at seeded He-normal
    values for the MLP. Training stops once the relative loss change drops
    below ``cfg.stop_pct`` percent or ``cfg.max_iters`` is reached.
    All-one-class targets return a constant predictor with
    ``status == "degenerate"`` and emit a warning.
    """
    cfg = cfg or FitConfig()
    if kind not in PREDICTOR_KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}")
    X = _check_finite(features, "features")
    t = np.asarray(targets, dtype=float)
    if X.ndim != 2 or t.shape != (X.shape[0],):
        raise ValueError("features must be (n, d) and targets (n,)")
    if X.shape[0] == 0:
        raise ValueError("cannot fit on an empty sample")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be binary")
    n, d = X.shape
    rng = np.random.default_rng(cfg.seed)

    if np.all(t == t[0]):
        warnings.warn(f"all targets equal {int(t[0])}; returning a constant {kind} predictor",
                      DegenerateFitWarning, stacklevel=2)
        return _constant_predictor(kind, d, int(t[0]), rng)

    if kind == "mlp":
        return _fit_mlp(X, t, cfg, rng)

    theta = np.zeros(d + 1)  # weights then bias
    mask = np.r_[np.ones(d), 0.0]
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        z = X @ theta[:d] + theta[d]
        nll, dz = _nll_and_dscore(kind, z, t)
        if not np.isfinite(nll):
            raise OptimizationError("non-finite classifier loss", state=theta.copy(), iteration=it)
        if trace and relative_change_pct(trace[-1], nll) < cfg.stop_pct:
            trace.append(float(nll))
            converged = True
            break
        trace.append(float(nll))
        grad = np.r_[X.T @ dz / n, dz.mean()]
        theta = sgd_step(theta, grad, cfg, mask)
    return PredictorParams(kind, theta[:d].copy(), float(theta[d]), n_iter=it,
                           converged=converged, loss_trace=trace)


def _fit_mlp(X, t, cfg, rng):
    n, d = X.shape
    H = MLP_HIDDEN
    W1 = rng.standard_normal((d, H)) * math.sqrt(2.0 / d)
    b1 = np.zeros(H)
    w2 = rng.standard_normal(H) * math.sqrt(1.0 / H)
    b2 = 0.0
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        pre = X @ W1 + b1
        hid = np.maximum(pre, 0.0)
        z = hid @ w2 + b2
        nll, dz = _nll_and_dscore("logit", z, t)
        if not np.isfinite(nll):
            raise OptimizationError("non-finite MLP loss", iteration=it)
        if trace and relative_change_pct(trace[-1], nll) < cfg.stop_pct:
            trace.append(float(nll))
            converged = True
            break
        trace.append(float(nll))
        dz = dz / n
        g_w2 = hid.T @ dz
        g_b2 = dz.sum()
        dpre = np.outer(dz, w2) * (pre > 0.0)
        g_W1 = X.T @ dpre
        g_b1 = dpre.sum(axis=0)
        lr, wd = cfg.learning_rate, cfg.weight_decay
        for g in (g_W1, g_b1, g_w2):
            if not np.all(np.isfinite(g)):
                raise OptimizationError("non-finite MLP gradient", iteration=it)
        W1 = W1 - lr * (g_W1 + wd * W1)
        w2 = w2 - lr * (g_w2 + wd * w2)
        b1 = b1 - lr * g_b1
        b2 = b2 - lr * g_b2
    return PredictorParams("mlp", w2, float(b2), hidden_weights=W1, hidden_bias=b1,
                           n_iter=it, converged=converged, loss_trace=trace)
