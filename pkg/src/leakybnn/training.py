"""MAP and mean-field variational training with Adam.

The variational family is a fully factorized Gaussian over every weight and
bias, ``q(w) = N(mu, softplus(rho)^2)``, fitted against an ``N(0, 1)`` prior by
the reparameterization trick.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import calibration
from .dataset import DataSplit
from .errors import NonFiniteLoss, ShapeMismatch
from .nn import (
    Architecture,
    PointNetwork,
    backward_arrays,
    check_params,
    forward_arrays,
    init_params,
    nll_and_dlogits,
    softmax,
)

KL_MODES = ("minibatch", "per_example")


@dataclass
class TrainConfig:
    lr: float = 0.001
    epochs: int = 20
    batch_size: int = 100
    seed: int = 0
    alpha: float = 0.0
    mc_samples_train: int = 1
    mc_samples_predict: int = 32
    kl_scale: str = "minibatch"
    rho_init: float = -5.0
    n_bins: int = calibration.DEFAULT_BINS

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.mc_samples_train < 1 or self.mc_samples_predict < 1:
            raise ValueError("Monte-Carlo sample counts must be >= 1")
        if self.kl_scale not in KL_MODES:
            raise ValueError(f"kl_scale must be one of {KL_MODES}")
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError(f"activation slope {self.alpha} outside [-1, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, lr: float):
    """Bias-corrected Adam update, applied in place; returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and Adam moments differ in length")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------- posterior

def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class VariationalPosterior:
    arch: Architecture
    mu: list[np.ndarray]
    rho: list[np.ndarray]
    alpha: float = 0.0

    def __post_init__(self):
        check_params(self.arch, self.mu)
        check_params(self.arch, self.rho)

    @property
    def sigma(self) -> list[np.ndarray]:
        return [softplus(r) for r in self.rho]

    def mean_network(self) -> PointNetwork:
        return PointNetwork(self.arch, [m.copy() for m in self.mu], self.alpha)

    def copy(self) -> "VariationalPosterior":
        return VariationalPosterior(self.arch, [m.copy() for m in self.mu], [r.copy() for r in self.rho], self.alpha)


def init_posterior(arch: Architecture, rng: np.random.Generator, alpha: float = 0.0,
                   rho_init: float = -5.0) -> VariationalPosterior:
    mu = init_params(arch, rng)
    return VariationalPosterior(arch, mu, [np.full_like(m, rho_init) for m in mu], alpha)


def sample_weights(vp: VariationalPosterior, rng: np.random.Generator):
    """One reparameterized draw ``w = mu + sigma * eps``; returns (weights, eps)."""
    eps = [rng.standard_normal(m.shape) for m in vp.mu]
    w = [m + softplus(r) * e for m, r, e in zip(vp.mu, vp.rho, eps)]
    return w, eps


def kl_to_standard_normal(vp: VariationalPosterior) -> float:
    """Closed-form KL(q || N(0, 1)) summed over all parameters."""
    total = 0.0
    for m, r in zip(vp.mu, vp.rho):
        s = softplus(r)
        total += 0.5 * float(np.sum(m * m + s * s - 1.0 - 2.0 * np.log(s)))
    return total


def _kl_grads(vp: VariationalPosterior):
    g_mu, g_rho = [], []
    for m, r in zip(vp.mu, vp.rho):
        s = softplus(r)
        g_mu.append(m.copy())
        g_rho.append((s - 1.0 / s) * sigmoid(r))
    return g_mu, g_rho


def elbo_loss_and_grads(vp: VariationalPosterior, x, y, eps_draws, nll_weight: float, kl_weight: float):
    """``nll_weight * mean-batch NLL + kl_weight * KL`` under frozen noise draws.

    The NLL term is averaged over the supplied draws.  Returns
    (loss, mean NLL, KL, grad_mu, grad_rho).
    """
    sig = vp.sigma
    g_mu, g_rho = _kl_grads(vp)
    g_mu = [kl_weight * g for g in g_mu]
    g_rho = [kl_weight * g for g in g_rho]
    kl = kl_to_standard_normal(vp)
    nll_sum = 0.0
    if len(x) and nll_weight:
        S = len(eps_draws)
        for eps in eps_draws:
            w = [m + s * e for m, s, e in zip(vp.mu, sig, eps)]
            logits, caches = forward_arrays(vp.arch, w, vp.alpha, x)
            nll, d = nll_and_dlogits(logits, y)
            nll_sum += nll
            gw = backward_arrays(vp.arch, w, vp.alpha, caches, d)
            for k, (g, e, r) in enumerate(zip(gw, eps, vp.rho)):
                g = (nll_weight / S) * g
                g_mu[k] += g
                g_rho[k] += g * e * sigmoid(r)
        nll_mean = nll_sum / S
    else:
        nll_mean = 0.0
    return nll_weight * nll_mean + kl_weight * kl, nll_mean, kl, g_mu, g_rho


def predict_bayes(vp: VariationalPosterior, batch, S: int, rng: np.random.Generator, chunk: int = 4096):
    """Monte-Carlo predictive ``(1/S) sum_s softmax(f(x; w_s))``."""
    if S < 1:
        raise ValueError("S must be >= 1")
    batch = np.asarray(batch, dtype=np.float64)
    probs = np.zeros((len(batch), vp.arch.n_out))
    for _ in range(S):
        w, _ = sample_weights(vp, rng)
        for s in range(0, len(batch), chunk):
            logits, _ = forward_arrays(vp.arch, w, vp.alpha, batch[s:s + chunk])
            probs[s:s + chunk] += softmax(logits)
    probs /= S
    # renormalize away accumulated rounding so rows sum to 1 tightly
    return probs / probs.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- run records

@dataclass
class EpochRow:
    epoch: int
    train_nll: float
    kl: float
    elbo: float
    val_acc: float
    val_ece: float
    wall_time: float = field(default=0.0, compare=False)


RUN_COLUMNS = [f.name for f in fields(EpochRow) if f.name != "wall_time"]


@dataclass
class RunRecord:
    rows: list[EpochRow] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)


def _val_metrics(probs, labels, n_bins):
    if len(labels) == 0:
        return math.nan, math.nan
    pred = calibration.PredictionBatch(probs, labels)
    return calibration.accuracy(pred), calibration.ece(pred, n_bins)


def _split_arrays(arch: Architecture, data: DataSplit):
    (xtr, ytr), (xva, yva) = data.train, data.val
    xtr, xva = np.asarray(xtr.pixels), np.asarray(xva.pixels)
    for x in (xtr, xva):
        if len(x) and tuple(x.shape[1:]) != tuple(arch.input_shape):
            raise ShapeMismatch(f"data shape {x.shape[1:]} does not match architecture input {arch.input_shape}")
    return xtr, np.asarray(ytr.labels), xva, np.asarray(yva.labels)


def _streams(seed: int):
    init_ss, train_ss, _ = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss)


def _eval_rng(seed: int, epoch: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, epoch)))


def _batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def _check_finite(loss, epoch, step, what):
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"{what} became {loss} at epoch {epoch}, step {step}; "
                            "try a smaller learning rate")


def train_mfvi(arch: Architecture, data: DataSplit, cfg: TrainConfig, callback=None):
    """Fit a mean-field Gaussian posterior; returns (VariationalPosterior, RunRecord).

    Per minibatch of size B out of N examples in M batches the minimized loss is
    ``sum-batch NLL + KL / M`` ("minibatch") or ``mean-batch NLL + KL / N``
    ("per_example"); both are rescalings of the negative ELBO.  ``callback`` is
    invoked as ``callback(epoch_row, vp)`` after every epoch.
    """
    xtr, ytr, xva, yva = _split_arrays(arch, data)
    init_rng, rng = _streams(cfg.seed)
    vp = init_posterior(arch, init_rng, cfg.alpha, cfg.rho_init)
    opt_mu, opt_rho = AdamState.like(vp.mu), AdamState.like(vp.rho)
    N = len(xtr)
    record = RunRecord()
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        batches = _batches(N, cfg.batch_size, rng) if N else [np.zeros(0, dtype=np.int64)]
        M = len(batches)
        nll_acc = 0.0
        for step, idx in enumerate(batches):
            eps_draws = [[rng.standard_normal(m.shape) for m in vp.mu] for _ in range(cfg.mc_samples_train)]
            if cfg.kl_scale == "minibatch":
                nll_w, kl_w = float(len(idx)), 1.0 / M
            else:
                nll_w, kl_w = 1.0, 1.0 / max(N, 1)
            loss, nll, _, g_mu, g_rho = elbo_loss_and_grads(vp, xtr[idx], ytr[idx], eps_draws, nll_w, kl_w)
            _check_finite(loss, epoch, step, "variational loss")
            adam_step(opt_mu, vp.mu, g_mu, cfg.lr)
            adam_step(opt_rho, vp.rho, g_rho, cfg.lr)
            nll_acc += nll * len(idx)
        train_nll = nll_acc / N if N else 0.0
        kl = kl_to_standard_normal(vp)
        elbo = -(train_nll + kl / N) if N else -kl
        probs = predict_bayes(vp, xva, cfg.mc_samples_predict, _eval_rng(cfg.seed, epoch)) if len(xva) else None
        acc, e = _val_metrics(probs, yva, cfg.n_bins)
        row = EpochRow(epoch, train_nll, kl, elbo, acc, e, time.perf_counter() - t0)
        record.rows.append(row)
        if callback is not None:
            callback(row, vp)
    return vp, record


def train_map(arch: Architecture, data: DataSplit, cfg: TrainConfig, callback=None):
    """Plain NLL minimization with Adam; returns (PointNetwork, RunRecord)."""
    xtr, ytr, xva, yva = _split_arrays(arch, data)
    init_rng, rng = _streams(cfg.seed)
    net = PointNetwork(arch, init_params(arch, init_rng), cfg.alpha)
    opt = AdamState.like(net.params)
    N = len(xtr)
    record = RunRecord()
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        nll_acc = 0.0
        for step, idx in enumerate(_batches(N, cfg.batch_size, rng)):
            logits, caches = forward_arrays(arch, net.params, net.alpha, xtr[idx])
            nll, d = nll_and_dlogits(logits, ytr[idx])
            _check_finite(nll, epoch, step, "NLL")
            grads = backward_arrays(arch, net.params, net.alpha, caches, d)
            adam_step(opt, net.params, grads, cfg.lr)
            nll_acc += nll * len(idx)
        train_nll = nll_acc / N if N else 0.0
        probs = None
        if len(xva):
            logits, _ = forward_arrays(arch, net.params, net.alpha, xva)
            probs = softmax(logits)
        acc, e = _val_metrics(probs, yva, cfg.n_bins)
        row = EpochRow(epoch, train_nll, 0.0, -train_nll, acc, e, time.perf_counter() - t0)
        record.rows.append(row)
        if callback is not None:
            callback(row, net)
    return net, record
