"""Dense multi-head attention math in float64.

Tensors follow the ``[batch, heads, length, head_dim]`` layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class AttentionBatch:
    """Query/key/value tensors. ``v`` is optional because salience only needs q and k."""

    q: np.ndarray
    k: np.ndarray
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("q", "k", "v"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 4:
                raise ShapeError(f"{name} must be 4-D [B, N, L, D], got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, arr)
        q, k, v = self.q, self.k, self.v
        if q.shape[0] != k.shape[0] or q.shape[1] != k.shape[1] or q.shape[3] != k.shape[3]:
            raise ShapeError(f"q {q.shape} and k {k.shape} disagree on B, N or D")
        if q.shape[3] < 1:
            raise ShapeError("head dimension must be >= 1")
        if v is not None and v.shape != k.shape:
            raise ShapeError(f"v {v.shape} must match k {k.shape}")

    @property
    def batch(self) -> int:
        return self.q.shape[0]

    @property
    def heads(self) -> int:
        return self.q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q.shape[3]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row softmax with max subtraction."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def attention_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    return np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])


def attention_weights(batch: AttentionBatch) -> np.ndarray:
    """``softmax(q k^T / sqrt(D))`` with shape ``[B, N, L_q, L_k]``."""
    return softmax(attention_logits(batch.q, batch.k))


def attention_output(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if p.ndim != v.ndim or p.shape[:-2] != v.shape[:-2] or p.shape[-1] != v.shape[-2]:
        raise ShapeError(f"weights {p.shape} incompatible with values {v.shape}")
    return np.matmul(p, v)
