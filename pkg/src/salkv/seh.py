"""Salience estimation head: a two-layer SiLU MLP over concatenated q/k/v.

Per token the heads of q, k and v are merged into the feature axis and the
three blocks are concatenated, giving ``3 * N * D`` input features. The MLP
emits ``d_out`` channels which are averaged into one score per token.

Gradients are written out by hand and trained with a decoupled-weight-decay
Adam update.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .attention import AttentionBatch
from .errors import ShapeError

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class SehParams:
    w1: np.ndarray  # [d_in, d_hidden]
    b1: np.ndarray  # [d_hidden]
    w2: np.ndarray  # [d_hidden, d_out]
    b2: np.ndarray  # [d_out]

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_out: int = 12, seed: int = 0) -> "SehParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer."""
        rng = np.random.default_rng(seed)
        a1 = 1.0 / np.sqrt(d_in)
        a2 = 1.0 / np.sqrt(d_hidden)
        return cls(
            w1=rng.uniform(-a1, a1, (d_in, d_hidden)),
            b1=rng.uniform(-a1, a1, d_hidden),
            w2=rng.uniform(-a2, a2, (d_hidden, d_out)),
            b2=rng.uniform(-a2, a2, d_out),
        )

    @classmethod
    def zeros(cls, d_in: int, d_hidden: int, d_out: int = 12) -> "SehParams":
        return cls(np.zeros((d_in, d_hidden)), np.zeros(d_hidden), np.zeros((d_hidden, d_out)), np.zeros(d_out))

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self) -> "SehParams":
        return SehParams(*(np.array(a, dtype=np.float64, copy=True) for _, a in self.items()))

    def map(self, fn) -> "SehParams":
        return SehParams(*(fn(a) for _, a in self.items()))


def seh_features(batch: AttentionBatch) -> np.ndarray:
    """``[B, L, 3*N*D]``: token t, head n, dim d of q lands at ``n*D + d``."""
    if batch.v is None:
        raise ShapeError("seh_features needs v")
    q, k, v = batch.q, batch.k, batch.v
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} must have the same length")
    B, N, L, D = q.shape
    merged = [x.transpose(0, 2, 1, 3).reshape(B, L, N * D) for x in (q, k, v)]
    return np.concatenate(merged, axis=-1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_width(x: np.ndarray, params: SehParams):
    if x.shape[-1] != params.d_in:
        raise ShapeError(f"feature width {x.shape[-1]} does not match head input {params.d_in}")


def predict(x: np.ndarray, params: SehParams) -> np.ndarray:
    """Scores ``[B, L]`` from precomputed features ``[B, L, d_in]``."""
    _check_width(x, params)
    h = x @ params.w1 + params.b1
    a = h * _sigmoid(h)
    return (a @ params.w2 + params.b2).mean(axis=-1)


def seh_forward(batch: AttentionBatch, params: SehParams) -> np.ndarray:
    return predict(seh_features(batch), params)


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = np.abs(pred - target)
    loss = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return float(loss.mean())


def smooth_l1_grad(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """d(mean SmoothL1)/d(pred)."""
    d = pred - target
    g = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return g / d.size


def loss_and_grads(x: np.ndarray, params: SehParams, target: np.ndarray, beta: float = 1.0):
    """Loss and analytic gradients for features ``x`` of shape ``[B, L, d_in]``."""
    _check_width(x, params)
    h = x @ params.w1 + params.b1
    sig = _sigmoid(h)
    a = h * sig
    pred = (a @ params.w2 + params.b2).mean(axis=-1)
    loss = smooth_l1(pred, target, beta)

    g_pred = smooth_l1_grad(pred, target, beta)  # [B, L]
    g_out = np.repeat(g_pred[..., None] / params.d_out, params.d_out, axis=-1)
    x2 = x.reshape(-1, x.shape[-1])
    a2 = a.reshape(-1, a.shape[-1])
    g_out2 = g_out.reshape(-1, params.d_out)

    gw2 = a2.T @ g_out2
    gb2 = g_out2.sum(axis=0)
    g_a = g_out2 @ params.w2.T
    g_h = g_a * (sig.reshape(g_a.shape) * (1.0 + h.reshape(g_a.shape) * (1.0 - sig.reshape(g_a.shape))))
    gw1 = x2.T @ g_h
    gb1 = g_h.sum(axis=0)
    return loss, SehParams(gw1, gb1, gw2, gb2)


def seh_backward(batch: AttentionBatch, params: SehParams, target: np.ndarray, beta: float = 1.0) -> SehParams:
    return loss_and_grads(seh_features(batch), params, target, beta)[1]


@dataclass
class OptimizerState:
    lr: float = 1e-5
    betas: tuple[float, float] = (0.0, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m: Optional[SehParams] = field(default=None, repr=False)
    v: Optional[SehParams] = field(default=None, repr=False)

    @classmethod
    def for_params(cls, params: SehParams, **kw) -> "OptimizerState":
        zeros = params.map(np.zeros_like)
        return cls(m=zeros, v=zeros.map(np.copy), **kw)


def adamw_update(params: SehParams, grads: SehParams, opt: OptimizerState) -> tuple[SehParams, OptimizerState]:
    if opt.m is None or opt.v is None:
        opt = replace(opt, m=params.map(np.zeros_like), v=params.map(np.zeros_like))
    b1, b2 = opt.betas
    step = opt.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * getattr(opt.m, name) + (1.0 - b1) * g
        v = b2 * getattr(opt.v, name) + (1.0 - b2) * g * g
        p = p * (1.0 - opt.lr * opt.weight_decay)
        new_p[name] = p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        new_m[name] = m
        new_v[name] = v
    return SehParams(**new_p), replace(opt, step=step, m=SehParams(**new_m), v=SehParams(**new_v))


def seh_train_step(
    params: SehParams,
    opt: OptimizerState,
    batch: AttentionBatch | np.ndarray,
    target: np.ndarray,
    beta: float = 1.0,
) -> tuple[SehParams, OptimizerState, float]:
    """One update. ``batch`` may also be a precomputed feature array. Returns the pre-update loss."""
    x = seh_features(batch) if isinstance(batch, AttentionBatch) else np.asarray(batch, dtype=np.float64)
    loss, grads = loss_and_grads(x, params, target, beta)
    params, opt = adamw_update(params, grads, opt)
    return params, opt, loss
