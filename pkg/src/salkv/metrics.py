"""Diagnostics: argmax histograms, top-k overlap, retained attention mass."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .kv_cache import top_k_indices

BINS = 7


def argmax_histogram(p: np.ndarray, bins: int = BINS) -> np.ndarray:
    """Count ``(query, argmax key)`` pairs on a ``bins x bins`` grid, summed over batch and heads.

    Rows index the query bin, columns the key bin. Ties go to the lowest key.
    """
    p = np.asarray(p)
    if p.ndim != 4 or p.shape[-1] != p.shape[-2]:
        raise ShapeError(f"expected square attention weights [B, N, L, L], got {p.shape}")
    L = p.shape[-1]
    if L < bins:
        raise ValueError(f"sequence length {L} is shorter than the {bins} bins")
    arg = np.argmax(p, axis=-1)  # first maximum -> lowest key index
    qbin = (bins * np.arange(L)) // L
    kbin = (bins * arg) // L
    flat = np.broadcast_to(qbin, arg.shape) * bins + kbin
    return np.bincount(flat.ravel(), minlength=bins * bins).reshape(bins, bins)


def diagonal_share(counts: np.ndarray) -> float:
    return float(np.trace(counts) / counts.sum())


def topk_overlap(a, b, k: int) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"score vectors differ in length: {a.shape} vs {b.shape}")
    if not 1 <= k <= len(a):
        raise ValueError(f"k must be in [1, {len(a)}], got {k}")
    common = np.intersect1d(top_k_indices(a, k), top_k_indices(b, k))
    return len(common) / k


def retained_attention_mass(p: np.ndarray, candidate_ids, retained_ids) -> float:
    """Share of the attention in ``p`` (keys on the last axis = ``candidate_ids``) that lands on retained keys."""
    p = np.asarray(p, dtype=np.float64)
    candidate_ids = np.asarray(candidate_ids)
    retained_ids = np.asarray(retained_ids)
    if p.shape[-1] != len(candidate_ids):
        raise ShapeError(f"{p.shape[-1]} keys but {len(candidate_ids)} candidate ids")
    unknown = np.setdiff1d(retained_ids, candidate_ids)
    if len(unknown):
        raise ValueError(f"retained ids not among candidates: {unknown[:5].tolist()}")
    mask = np.isin(candidate_ids, retained_ids)
    total = p.sum()
    return float(p[..., mask].sum() / total) if total > 0 else 0.0
