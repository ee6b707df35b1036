"""Block-decomposed salience scores over attention weights.

Keys and queries are grouped into blocks of ``block_len`` tokens. For a key
``j`` the queries split into three groups relative to the key's block:

* ``low``  - queries in later blocks (they look back at ``j``),
* ``diag`` - queries in the same block,
* ``up``   - queries in earlier blocks.

For each group we take the maximum attention probability over the queries,
average that over heads, and fuse the non-empty groups by their mean. A group
with no queries is marked empty (NaN) and left out of the mean.

Two implementations are provided: a dense one that materialises the full
``[B, N, L, L]`` probability tensor, and a streaming one that walks the
queries in chunks and keeps only per-head running maxima.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import AttentionBatch, attention_logits, attention_weights, softmax
from .errors import ShapeError

EMPTY = np.nan
HEAD_ORDERS = ("max-mean", "mean-max")


@dataclass(frozen=True)
class BlockGeometry:
    seq_len: int
    block_len: int

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.block_len < 1:
            raise ValueError(f"block_len must be >= 1, got {self.block_len}")

    @property
    def num_blocks(self) -> int:
        return -(-self.seq_len // self.block_len)

    def block_range(self, block: int) -> tuple[int, int]:
        lower = block * self.block_len
        return lower, min(lower + self.block_len, self.seq_len)


def block_bounds(i: int, geom: BlockGeometry) -> tuple[int, int, int]:
    """Return ``(block, lower, upper)`` for token ``i``; ``upper`` is clamped to the sequence."""
    if not 0 <= i < geom.seq_len:
        raise IndexError(f"token index {i} outside [0, {geom.seq_len})")
    block = i // geom.block_len
    lower, upper = geom.block_range(block)
    return block, lower, upper


@dataclass(frozen=True)
class ComponentMaxima:
    """Head-averaged per-key maxima, each ``[B, L]``. NaN marks an empty group."""

    low: np.ndarray
    diag: np.ndarray
    up: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.low, self.diag, self.up])


def _check_geometry(length: int, geom: BlockGeometry):
    if length != geom.seq_len:
        raise ShapeError(f"sequence length {length} does not match geometry seq_len {geom.seq_len}")


def _finalize(low, diag, up, head_order: str) -> ComponentMaxima:
    # Running maxima start at -inf; anything still -inf never saw a query.
    out = []
    for arr in (low, diag, up):
        arr = np.where(np.isneginf(arr), EMPTY, arr)
        if head_order == "max-mean":
            arr = arr.mean(axis=1)
        out.append(arr)
    return ComponentMaxima(*out)


def component_maxima(p: np.ndarray, geom: BlockGeometry, head_order: str = "max-mean") -> ComponentMaxima:
    """Per-group query maxima of a square ``[B, N, L, L]`` probability tensor.

    ``head_order="max-mean"`` takes the max over queries per head and then the
    head mean. ``"mean-max"`` averages heads first; it exists for comparison.
    """
    if head_order not in HEAD_ORDERS:
        raise ValueError(f"unknown head_order {head_order!r}")
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 4 or p.shape[-1] != p.shape[-2]:
        raise ShapeError(f"expected square attention weights [B, N, L, L], got {p.shape}")
    _check_geometry(p.shape[-1], geom)
    if head_order == "mean-max":
        p = p.mean(axis=1)
    nb = geom.num_blocks

    # blockmax[..., b, j]: max over queries of block b, attending key j
    blockmax = np.stack([p[..., lo:hi, :].max(axis=-2) for lo, hi in map(geom.block_range, range(nb))], axis=-2)
    neg = np.full_like(blockmax[..., :1, :], -np.inf)
    # later[b] = max over blocks > b; earlier[b] = max over blocks < b
    later = np.concatenate([np.maximum.accumulate(blockmax[..., ::-1, :], axis=-2)[..., ::-1, :][..., 1:, :], neg], axis=-2)
    earlier = np.concatenate([neg, np.maximum.accumulate(blockmax, axis=-2)[..., :-1, :]], axis=-2)

    key_block = np.arange(geom.seq_len) // geom.block_len
    cols = np.arange(geom.seq_len)
    low = later[..., key_block, cols]
    diag = blockmax[..., key_block, cols]
    up = earlier[..., key_block, cols]
    return _finalize(low, diag, up, head_order)


def fuse_salience(cm: ComponentMaxima, geom: BlockGeometry) -> np.ndarray:
    """Mean of the non-empty groups per key, shape ``[B, L]``."""
    stacked = cm.stacked()
    if stacked.shape[-1] != geom.seq_len:
        raise ShapeError(f"component length {stacked.shape[-1]} does not match geometry seq_len {geom.seq_len}")
    present = ~np.isnan(stacked)
    total = np.where(present, stacked, 0.0).sum(axis=0)
    return total / present.sum(axis=0)


def salience_scores(batch: AttentionBatch, geom: BlockGeometry, head_order: str = "max-mean") -> np.ndarray:
    """Dense salience: materialises the full attention tensor."""
    if batch.q.shape[2] != batch.k.shape[2]:
        raise ShapeError("salience needs self-attention: q and k lengths differ")
    _check_geometry(batch.q.shape[2], geom)
    return fuse_salience(component_maxima(attention_weights(batch), geom, head_order), geom)


def blockwise_salience(
    batch: AttentionBatch,
    geom: BlockGeometry,
    chunk_len: int,
    head_order: str = "max-mean",
    stats: Optional[dict] = None,
) -> np.ndarray:
    """Streaming salience over query chunks of at most ``chunk_len`` rows.

    The key axis is never split, so each chunk's softmax is exact. Chunks that
    cross a block boundary are cut at the boundary. If ``stats`` is given, the
    largest attention-row buffer (in elements) is recorded under
    ``"peak_row_elements"``.
    """
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    if head_order not in HEAD_ORDERS:
        raise ValueError(f"unknown head_order {head_order!r}")
    q, k = batch.q, batch.k
    if q.shape[2] != k.shape[2]:
        raise ShapeError("salience needs self-attention: q and k lengths differ")
    L = q.shape[2]
    _check_geometry(L, geom)

    shape = k.shape[:2] + (L,) if head_order == "max-mean" else (k.shape[0], L)
    low = np.full(shape, -np.inf)
    diag = np.full(shape, -np.inf)
    up = np.full(shape, -np.inf)
    peak = 0

    for start in range(0, L, chunk_len):
        end = min(start + chunk_len, L)
        s = start
        while s < end:
            _, lo, hi = block_bounds(s, geom)
            e = min(end, hi)
            p = softmax(attention_logits(q[:, :, s:e], k))
            peak = max(peak, p.size)
            if head_order == "mean-max":
                p = p.mean(axis=1)
            m = p.max(axis=-2)
            np.maximum(low[..., :lo], m[..., :lo], out=low[..., :lo])
            np.maximum(diag[..., lo:hi], m[..., lo:hi], out=diag[..., lo:hi])
            np.maximum(up[..., hi:], m[..., hi:], out=up[..., hi:])
            del p, m
            s = e

    if stats is not None:
        stats["peak_row_elements"] = peak
    return fuse_salience(_finalize(low, diag, up, head_order), geom)
