"""Toy chunk-wise autoregressive rollout.

A small stack of fixed random attention layers stands in for the denoiser:
each chunk starts from seeded noise, is denoised over a few timesteps while
attending to whatever the cache currently holds, and is then run once more
on its clean estimate to produce the keys/values that enter the cache. The
re-noising between steps is a plain linear mix ``alpha * x0 + sigma * eps``.

Scores for eviction come either from the salience head or, for the
``oracle`` scorer, from block salience over the chunk's own final-layer
attention rows.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .attention import AttentionBatch, attention_logits, attention_output, softmax
from .config import RunConfig
from .kv_cache import KvCache, set_policy_scores
from .metrics import retained_attention_mass, topk_overlap
from .salience import BlockGeometry, component_maxima, fuse_salience
from .seh import OptimizerState, SehParams, loss_and_grads, adamw_update, predict, seh_features


@dataclass(frozen=True)
class DenoiseSchedule:
    timesteps: tuple = (1.0, 0.75, 0.5, 0.25)

    def __post_init__(self):
        ts = self.timesteps
        if not ts or any(b >= a for a, b in zip(ts, ts[1:])) or ts[-1] < 0:
            raise ValueError("timesteps must be strictly decreasing and non-negative")

    @staticmethod
    def alpha(t: float) -> float:
        return 1.0 - t

    @staticmethod
    def sigma(t: float) -> float:
        return float(np.sqrt(max(0.0, 1.0 - (1.0 - t) ** 2)))

    def renoise(self, x0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
        return self.alpha(t) * x0 + self.sigma(t) * eps


@dataclass
class ForwardOut:
    out: np.ndarray  # [T, d_model]
    keys: np.ndarray  # [T, layers, N, D]
    values: np.ndarray  # [T, layers, N, D]
    q: np.ndarray  # final layer [N, T, D]
    k: np.ndarray
    v: np.ndarray
    p: np.ndarray  # final layer attention [N, T, M + T]


def _rms_norm(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)


class ToyModel:
    def __init__(
        self,
        heads: int = 4,
        head_dim: int = 16,
        layers: int = 2,
        frame_tokens: int = 64,
        chunk_frames: int = 3,
        seed: int = 0,
        logit_scale: float = 1.0,
    ):
        self.heads = heads
        self.head_dim = head_dim
        self.layers = layers
        self.frame_tokens = frame_tokens
        self.chunk_frames = chunk_frames
        self.seed = seed
        self.logit_scale = logit_scale
        d = self.d_model
        rng = np.random.default_rng([seed, 7919])
        scale = 1.0 / np.sqrt(d)
        self.wq = rng.normal(0.0, scale, (layers, d, d)) * np.sqrt(logit_scale)
        self.wk = rng.normal(0.0, scale, (layers, d, d)) * np.sqrt(logit_scale)
        self.wv = rng.normal(0.0, scale, (layers, d, d))
        self.wo = rng.normal(0.0, scale, (layers, d, d))
        self.time_embed = rng.normal(0.0, 1.0, d)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "ToyModel":
        return cls(cfg.heads, cfg.head_dim, cfg.layers, cfg.frame_tokens, cfg.chunk_frames, cfg.seed, cfg.logit_scale)

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim

    @property
    def chunk_tokens(self) -> int:
        return self.frame_tokens * self.chunk_frames

    def _split(self, x):
        T = x.shape[0]
        return x.reshape(T, self.heads, self.head_dim).transpose(1, 0, 2)

    def forward(self, x, t: float, context=None, bias=None) -> ForwardOut:
        """Run all layers on chunk states ``x`` ``[T, d_model]``.

        ``context`` is ``(keys, values)`` with shape ``[M, layers, N, D]``;
        ``bias`` is an additive logit per key (context keys first).
        Attention is bidirectional within the chunk.
        """
        T = x.shape[0]
        h = x + t * self.time_embed
        ks, vs = [], []
        for layer in range(self.layers):
            q = self._split(h @ self.wq[layer])
            k = self._split(h @ self.wk[layer])
            v = self._split(h @ self.wv[layer])
            ks.append(k)
            vs.append(v)
            if context is not None and len(context[0]):
                kk = np.concatenate([context[0][:, layer].transpose(1, 0, 2), k], axis=1)
                vv = np.concatenate([context[1][:, layer].transpose(1, 0, 2), v], axis=1)
            else:
                kk, vv = k, v
            logits = attention_logits(q, kk)
            if bias is not None:
                logits = logits + bias
            p = softmax(logits)
            o = attention_output(p, vv).transpose(1, 0, 2).reshape(T, self.d_model)
            h = _rms_norm(h + o @ self.wo[layer])
        keys = np.stack(ks, axis=0).transpose(2, 0, 1, 3)
        values = np.stack(vs, axis=0).transpose(2, 0, 1, 3)
        return ForwardOut(h, keys, values, q, k, v, p)


@dataclass
class ChunkRecord:
    chunk: int
    tokens: int
    context_len: int
    cache_before: int
    cache_after: int
    report: dict
    scores: list
    output_sha1: str
    retained_attention_mass: Optional[float] = None
    teacher_scores: Optional[list] = None
    wall_time: Optional[float] = None

    def to_dict(self) -> dict:
        d = {
            "chunk": self.chunk,
            "tokens": self.tokens,
            "context_len": self.context_len,
            "cache_before": self.cache_before,
            "cache_after": self.cache_after,
            "evicted": self.report["evicted"],
            "retained": self.report["retained"],
            "num_evicted": len(self.report["evicted"]),
            "scores": self.scores,
            "output_sha1": self.output_sha1,
            "retained_attention_mass": self.retained_attention_mass,
        }
        if self.teacher_scores is not None:
            d["teacher_scores"] = self.teacher_scores
        if self.wall_time is not None:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class RolloutTrace:
    records: list = field(default_factory=list)
    final_token_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    # in-memory only, not serialised
    outputs: list = field(default_factory=list, repr=False)
    activations: list = field(default_factory=list, repr=False)

    @property
    def eviction_events(self) -> int:
        return sum(1 for r in self.records if r.report["evicted"])

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def summary(self) -> dict:
        masses = [r.retained_attention_mass for r in self.records if r.retained_attention_mass is not None]
        return {
            "chunks": len(self.records),
            "eviction_events": self.eviction_events,
            "evicted_tokens": sum(len(r.report["evicted"]) for r in self.records),
            "final_cache_size": len(self.final_token_ids),
            "max_context_len": max((r.context_len for r in self.records), default=0),
            "mean_retained_attention_mass": float(np.mean(masses)) if masses else None,
        }


def _key_bias(ids: np.ndarray, cfg: RunConfig) -> Optional[np.ndarray]:
    if not cfg.anchor_ids or cfg.anchor_bias == 0.0:
        return None
    return np.where(np.isin(ids, cfg.anchor_ids), cfg.anchor_bias, 0.0)


def chunk_scores(policy: str, p_rows: np.ndarray, n_context: int, block_len: int) -> np.ndarray:
    """Scores for the chunk's own keys from its attention rows ``[N, T, M + T]``."""
    p = p_rows[None, :, :, n_context:]
    T = p.shape[-1]
    if policy in ("max", "avg"):
        return set_policy_scores(policy, p)[0]
    geom = BlockGeometry(T, min(block_len, T))
    return fuse_salience(component_maxima(p, geom), geom)[0]


def _digest(x: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()


def rollout_infer(
    model: ToyModel,
    sched: DenoiseSchedule,
    cfg: RunConfig,
    num_frames: int,
    seed: int = 0,
    seh_params: Optional[SehParams] = None,
    keep_activations: bool = False,
    timing: bool = False,
) -> RolloutTrace:
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if cfg.scorer == "seh" and seh_params is None:
        raise ValueError("scorer 'seh' needs seh_params")
    cache = KvCache(cfg.capacity, cfg.sink_count, cfg.policy, cfg.evict_order, seed)
    rng = np.random.default_rng([seed, 1])
    trace = RolloutTrace()
    pending = None  # (candidate ids, final-layer candidate keys [N, C, D], retained ids)
    score_policy = cfg.policy if cfg.policy in ("max", "avg") else "salience"

    frames_left = num_frames
    chunk = 0
    while frames_left > 0:
        chunk += 1
        started = time.perf_counter()
        frames = min(model.chunk_frames, frames_left)
        frames_left -= frames
        T = frames * model.frame_tokens
        ctx_keys, ctx_values, ctx_ids = cache.select()
        context = (ctx_keys, ctx_values) if len(ctx_ids) else None
        ids = np.arange(cache.next_token_id, cache.next_token_id + T)
        bias = _key_bias(np.concatenate([ctx_ids, ids]), cfg)

        x = rng.standard_normal((T, model.d_model))
        ts = sched.timesteps
        for j, t in enumerate(ts):
            x0 = model.forward(x, t, context, bias).out
            if j + 1 < len(ts):
                x = sched.renoise(x0, rng.standard_normal(x0.shape), ts[j + 1])
        final = model.forward(x0, 0.0, context, bias)

        mass = None
        if pending is not None:
            cand_ids, cand_keys, kept = pending
            logits = attention_logits(final.q, cand_keys)
            cand_bias = _key_bias(cand_ids, cfg)
            if cand_bias is not None:
                logits = logits + cand_bias
            p_next = softmax(logits)
            mass = retained_attention_mass(p_next, cand_ids, kept)
            pending = None

        if cfg.scorer == "seh" and cfg.policy == "salience":
            batch = AttentionBatch(final.q[None], final.k[None], final.v[None])
            scores = predict(seh_features(batch), seh_params)[0]
        else:
            scores = chunk_scores(score_policy, final.p, len(ctx_ids), cfg.effective_block_len)

        before = len(cache)
        report = cache.append_chunk(final.keys, final.values, scores)
        if len(report.evicted):
            cand_ids = np.concatenate([ctx_ids, ids])
            last = model.layers - 1
            cand_keys = final.keys[:, last].transpose(1, 0, 2)
            if len(ctx_ids):
                cand_keys = np.concatenate([ctx_keys[:, last].transpose(1, 0, 2), cand_keys], axis=1)
            pending = (cand_ids, cand_keys, report.retained)

        trace.outputs.append(x0)
        if keep_activations:
            trace.activations.append((final.q, final.k, final.v))
        trace.records.append(
            ChunkRecord(
                chunk=chunk,
                tokens=T,
                context_len=len(ctx_ids),
                cache_before=before,
                cache_after=len(cache),
                report=report.to_dict(),
                scores=[float(s) for s in scores],
                output_sha1=_digest(x0),
                retained_attention_mass=mass,
                wall_time=time.perf_counter() - started if timing else None,
            )
        )
    trace.final_token_ids = cache.token_ids.copy()
    return trace


def teacher_salience(model: ToyModel, states, block_len: Optional[int] = None, bias=None) -> np.ndarray:
    """Block salience ``[1, L]`` of the full sequence under bidirectional attention.

    ``states`` is the list of denoised chunk states (or one ``[L, d_model]``
    array); the model is run once over the whole sequence without a cache.
    """
    x = np.concatenate(list(states), axis=0) if isinstance(states, (list, tuple)) else np.asarray(states)
    out = model.forward(x, 0.0, None, bias)
    L = x.shape[0]
    geom = BlockGeometry(L, block_len or model.chunk_tokens)
    return fuse_salience(component_maxima(out.p[None], geom), geom)


@dataclass
class TrainResult:
    params: SehParams
    opt: OptimizerState
    losses: list
    overlaps: list
    baseline_overlaps: list


def train_seh_loop(
    model: ToyModel,
    sched: DenoiseSchedule,
    cfg: RunConfig,
    params: SehParams,
    opt: OptimizerState,
    steps: int,
    seed: int = 0,
    teacher: Optional[Callable] = None,
) -> TrainResult:
    """Fit the salience head to teacher salience on fresh rollouts.

    Each step rolls out ``cfg.train_frames`` frames (three chunks when 0)
    with the current head driving eviction, scores the whole sequence with
    the bidirectional teacher, and takes one optimizer step on the causal
    final-layer q/k/v features. ``teacher`` may replace the teacher; it gets
    the list of chunk states and returns ``[1, L]`` targets.
    """
    losses, overlaps, baseline = [], [], []
    run_cfg = cfg.replace(policy="salience", scorer="seh")
    frames = cfg.train_frames or 3 * model.chunk_frames
    base_rng = np.random.default_rng([seed, 2])
    for step in range(steps):
        trace = rollout_infer(model, sched, run_cfg, frames, seed=seed * 1_000_003 + step, seh_params=params, keep_activations=True)
        q = np.concatenate([a[0] for a in trace.activations], axis=1)[None]
        k = np.concatenate([a[1] for a in trace.activations], axis=1)[None]
        v = np.concatenate([a[2] for a in trace.activations], axis=1)[None]
        x = seh_features(AttentionBatch(q, k, v))
        if teacher is None:
            target = teacher_salience(model, trace.outputs, cfg.effective_block_len)
        else:
            target = teacher(trace.outputs)
        pred = predict(x, params)
        loss, grads = loss_and_grads(x, params, target, cfg.smooth_l1_beta)
        params, opt = adamw_update(params, grads, opt)
        L = target.shape[-1]
        losses.append(loss)
        overlaps.append(topk_overlap(pred, target, max(1, L // 2)))
        baseline.append(topk_overlap(base_rng.random(L), target, max(1, L // 2)))
    return TrainResult(params, opt, losses, overlaps, baseline)


def default_anchor_ids(cfg: RunConfig, count: int = 8) -> tuple:
    """``count`` tokens spread over the second chunk (clear of the sink frame)."""
    start = cfg.chunk_tokens
    step = max(1, cfg.chunk_tokens // count)
    return tuple(int(start + i * step) for i in range(count))


def planted_salience_benchmark(
    cfg: RunConfig,
    seeds,
    num_frames: int = 24,
    policies=("salience", "fifo", "max", "avg", "random"),
    workers: int = 1,
) -> dict:
    """Anchor recall and retained attention mass per policy.

    Anchor tokens get an additive logit bias from every query; recall is the
    share of anchors still cached after the last chunk.
    """
    if not cfg.anchor_ids:
        cfg = cfg.replace(anchor_ids=default_anchor_ids(cfg))
    if cfg.anchor_bias == 0.0:
        cfg = cfg.replace(anchor_bias=8.0)
    cfg = cfg.replace(scorer="oracle")
    model = ToyModel.from_config(cfg)
    sched = DenoiseSchedule(tuple(cfg.timesteps))
    anchors = np.asarray(cfg.anchor_ids)

    def run(job):
        policy, seed = job
        trace = rollout_infer(model, sched, cfg.replace(policy=policy), num_frames, seed=seed)
        recall = float(np.isin(anchors, trace.final_token_ids).mean())
        summary = trace.summary()
        return recall, summary["mean_retained_attention_mass"]

    jobs = [(p, s) for p in policies for s in seeds]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    table = {}
    for (policy, seed), (recall, mass) in zip(jobs, results):
        row = table.setdefault(policy, {"seeds": [], "recall": [], "retained_attention_mass": []})
        row["seeds"].append(int(seed))
        row["recall"].append(recall)
        row["retained_attention_mass"].append(mass)
    for row in table.values():
        row["mean_recall"] = float(np.mean(row["recall"]))
        masses = [m for m in row["retained_attention_mass"] if m is not None]
        row["mean_retained_attention_mass"] = float(np.mean(masses)) if masses else None
    return table
