"""Bounded KV cache with a salience list kept in lockstep with the entries.

Entries carry a global ``token_id`` that only increases. The first
``sink_count`` tokens ever inserted are pinned and never evicted. When an
append pushes the cache past capacity, the history and the incoming chunk are
ranked together and the best ``capacity`` tokens stay (pins first).

Ranking is by score descending; equal scores go to the newer token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionBatch, attention_weights
from .errors import CapacityError, ShapeError
from .salience import BlockGeometry, component_maxima, fuse_salience

POLICIES = ("salience", "fifo", "max", "avg", "random")
EVICT_ORDERS = ("concat", "pre-append")


def top_k_indices(scores: np.ndarray, k: int, ids: np.ndarray | None = None) -> np.ndarray:
    """Positions of the ``k`` best scores; ties favour the larger id (position by default)."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    order = np.lexsort((-ids, -scores))
    return order[:k]


@dataclass
class EvictionReport:
    retained: np.ndarray  # token ids, ascending
    evicted: np.ndarray  # token ids, ascending
    scores: dict  # token id -> score at decision time, for every candidate

    @property
    def num_evicted(self) -> int:
        return len(self.evicted)

    def to_dict(self) -> dict:
        return {
            "retained": [int(t) for t in self.retained],
            "evicted": [int(t) for t in self.evicted],
        }


class KvCache:
    """Per-token key/value store.

    ``keys``/``values`` hold one row per entry with any trailing shape
    (``[N, D]`` for a single layer, ``[layers, N, D]`` for a stack).
    """

    def __init__(
        self,
        capacity: int,
        sink_count: int = 0,
        policy: str = "salience",
        evict_order: str = "concat",
        seed: int = 0,
    ):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
        if evict_order not in EVICT_ORDERS:
            raise ValueError(f"unknown evict_order {evict_order!r}")
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 0 <= sink_count < capacity:
            raise ValueError(f"sink_count must be in [0, capacity), got {sink_count}")
        self.capacity = capacity
        self.sink_count = sink_count
        self.policy = policy
        self.evict_order = evict_order
        self.seed = seed
        self.token_ids = np.zeros(0, dtype=np.int64)
        self.scores = np.zeros(0)
        self.keys: np.ndarray | None = None
        self.values: np.ndarray | None = None
        self.next_token_id = 0
        self.num_evictions = 0

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def pinned(self) -> np.ndarray:
        return self.token_ids < self.sink_count

    def _priority(self, ids: np.ndarray, scores: np.ndarray) -> np.ndarray:
        if self.policy == "fifo":
            return ids.astype(np.float64)
        if self.policy == "random":
            rng = np.random.default_rng([self.seed, self.num_evictions])
            return rng.random(len(ids))
        return scores

    def _choose(self, ids: np.ndarray, scores: np.ndarray, budget: int) -> np.ndarray:
        """Boolean keep-mask over ``ids``: all pins, then the best ``budget - pins`` others."""
        pinned = ids < self.sink_count
        keep = pinned.copy()
        free = np.flatnonzero(~pinned)
        slots = budget - int(pinned.sum())
        if slots > 0:
            prio = self._priority(ids[free], scores[free])
            keep[free[top_k_indices(prio, slots, ids[free])]] = True
        return keep

    def append_chunk(self, keys, values, scores) -> EvictionReport:
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        n = len(scores)
        if keys.shape[0] != n or values.shape != keys.shape:
            raise ShapeError(f"keys {keys.shape}, values {values.shape} and {n} scores disagree")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if self.keys is not None and keys.shape[1:] != self.keys.shape[1:]:
            raise ShapeError(f"entry shape {keys.shape[1:]} does not match cache {self.keys.shape[1:]}")
        new_ids = np.arange(self.next_token_id, self.next_token_id + n, dtype=np.int64)
        pins = int(self.pinned.sum()) + int((new_ids < self.sink_count).sum())
        if pins + int((new_ids >= self.sink_count).sum()) > self.capacity:
            raise CapacityError(
                f"chunk of {n} tokens does not fit in capacity {self.capacity} next to {pins} pinned tokens"
            )
        self.next_token_id += n
        all_ids = np.concatenate([self.token_ids, new_ids])
        all_scores = np.concatenate([self.scores, scores])
        all_keys = keys if self.keys is None else np.concatenate([self.keys, keys])
        all_values = values if self.values is None else np.concatenate([self.values, values])

        if len(all_ids) <= self.capacity:
            keep = np.ones(len(all_ids), dtype=bool)
        elif self.evict_order == "concat":
            keep = self._choose(all_ids, all_scores, self.capacity)
            self.num_evictions += 1
        else:
            # history is trimmed first; the new chunk always enters
            old = len(self.token_ids)
            keep = np.ones(len(all_ids), dtype=bool)
            keep[:old] = self._choose(self.token_ids, self.scores, self.capacity - n)
            self.num_evictions += 1

        report = EvictionReport(
            retained=all_ids[keep],
            evicted=all_ids[~keep],
            scores={int(t): float(s) for t, s in zip(all_ids, all_scores)},
        )
        self.token_ids = all_ids[keep]
        self.scores = all_scores[keep]
        self.keys = all_keys[keep]
        self.values = all_values[keep]
        return report

    def select(self):
        """Retained ``(keys, values, token_ids)`` in ascending token order."""
        if self.keys is None:
            return np.zeros((0,)), np.zeros((0,)), self.token_ids.copy()
        return self.keys, self.values, self.token_ids.copy()

    def save(self, prefix: str | Path):
        """Write ``<prefix>.keys.pfkv``, ``<prefix>.values.pfkv`` and a ``<prefix>.json`` sidecar."""
        from .tensorio import write_tensor

        prefix = str(prefix)
        if self.keys is not None:
            write_tensor(prefix + ".keys.pfkv", self.keys)
            write_tensor(prefix + ".values.pfkv", self.values)
        meta = {
            "capacity": self.capacity,
            "sink_count": self.sink_count,
            "policy": self.policy,
            "evict_order": self.evict_order,
            "seed": self.seed,
            "next_token_id": self.next_token_id,
            "num_evictions": self.num_evictions,
            "token_ids": [int(t) for t in self.token_ids],
            "scores": [float(s) for s in self.scores],
            "pins": [bool(p) for p in self.pinned],
        }
        Path(prefix + ".json").write_text(json.dumps(meta, indent=1) + "\n")

    @classmethod
    def load(cls, prefix: str | Path) -> "KvCache":
        from .tensorio import read_tensor

        prefix = str(prefix)
        meta = json.loads(Path(prefix + ".json").read_text())
        cache = cls(meta["capacity"], meta["sink_count"], meta["policy"], meta["evict_order"], meta["seed"])
        cache.next_token_id = meta["next_token_id"]
        cache.num_evictions = meta["num_evictions"]
        cache.token_ids = np.asarray(meta["token_ids"], dtype=np.int64)
        cache.scores = np.asarray(meta["scores"], dtype=np.float64)
        if len(cache.token_ids):
            cache.keys = read_tensor(prefix + ".keys.pfkv").astype(np.float64)
            cache.values = read_tensor(prefix + ".values.pfkv").astype(np.float64)
        return cache


def fifo_evict(cache: KvCache, keys, values) -> EvictionReport:
    """Append under first-in-first-out eviction regardless of the cache's configured policy."""
    saved = cache.policy
    cache.policy = "fifo"
    try:
        return cache.append_chunk(keys, values, np.zeros(len(keys)))
    finally:
        cache.policy = saved


def set_policy_scores(policy: str, p_or_batch, geom: BlockGeometry | None = None) -> np.ndarray:
    """Per-key scores ``[B, L]`` for the score-driven policies.

    ``salience`` needs ``geom``; ``max`` and ``avg`` pool over every query
    (per head, then averaged over heads).
    """
    if policy not in ("salience", "max", "avg"):
        raise ValueError(f"policy {policy!r} has no score function")
    p = attention_weights(p_or_batch) if isinstance(p_or_batch, AttentionBatch) else np.asarray(p_or_batch, dtype=np.float64)
    if p.ndim != 4:
        raise ShapeError(f"expected attention weights [B, N, L_q, L_k], got {p.shape}")
    if policy == "max":
        return p.max(axis=-2).mean(axis=1)
    if policy == "avg":
        return p.mean(axis=-2).mean(axis=1)
    if geom is None:
        geom = BlockGeometry(p.shape[-1], p.shape[-1])
    return fuse_salience(component_maxima(p, geom), geom)
