"""Command-line entry point: ``salkv <command> ...``.

Exit codes: 0 success, 1 input/format error, 2 usage error, 3 numeric failure.
Errors go to stderr as a single ``error: <kind>: <message>`` line.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np

from .attention import AttentionBatch, attention_weights
from .config import ConfigError, RunConfig, load_config
from .errors import CapacityError, FormatError, ShapeError, ValidationError
from .harness import DenoiseSchedule, ToyModel, planted_salience_benchmark, rollout_infer, train_seh_loop
from .kv_cache import POLICIES
from .metrics import argmax_histogram, topk_overlap
from .salience import BlockGeometry, blockwise_salience, component_maxima, fuse_salience
from .seh import PARAM_NAMES, OptimizerState, SehParams
from .tensorio import read_tensor, write_tensor


class NumericError(RuntimeError):
    pass


def _check_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _as_bnld(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    while arr.ndim < 4:
        arr = arr[None]
    return arr


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig().validate()


def save_checkpoint(directory, params: SehParams, seed: int):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, arr in params.items():
        write_tensor(d / f"{name}.pfkv", arr)
    meta = {"d_in": params.d_in, "d_hidden": params.d_hidden, "d_out": params.d_out, "seed": seed}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_checkpoint(directory) -> SehParams:
    d = Path(directory)
    return SehParams(*(read_tensor(d / f"{name}.pfkv").astype(np.float64) for name in PARAM_NAMES))


def cmd_salience(args) -> int:
    q = _as_bnld(read_tensor(args.q))
    k = _as_bnld(read_tensor(args.k))
    batch = AttentionBatch(q, k)
    geom = BlockGeometry(q.shape[2], args.block_len)
    if args.chunk_len is None:
        p = attention_weights(batch)
        s = fuse_salience(component_maxima(p, geom, args.head_order), geom)
    else:
        s = blockwise_salience(batch, geom, args.chunk_len, args.head_order)
    _check_finite(s, "salience scores")
    write_tensor(args.out, s)
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args.config).replace(policy=args.policy, seed=args.seed)
    seh = None
    if args.seh:
        seh = load_checkpoint(args.seh)
        cfg = cfg.replace(scorer="seh")
    cfg.validate()
    model = ToyModel.from_config(cfg)
    sched = DenoiseSchedule(tuple(cfg.timesteps))
    trace = rollout_infer(model, sched, cfg, args.frames, seed=args.seed, seh_params=seh, timing=args.timing)
    for r in trace.records:
        _check_finite(r.scores, f"scores of chunk {r.chunk}")
    Path(args.out_trace).write_text(trace.to_jsonl())
    summary = {"policy": cfg.policy, "scorer": cfg.scorer, "seed": args.seed, "frames": args.frames}
    summary.update(trace.summary())
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config).replace(seed=args.seed)
    model = ToyModel.from_config(cfg)
    sched = DenoiseSchedule(tuple(cfg.timesteps))
    params = SehParams.init(cfg.seh_in, cfg.seh_hidden, cfg.seh_out, seed=args.seed)
    opt = OptimizerState.for_params(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay, eps=cfg.eps
    )
    res = train_seh_loop(model, sched, cfg, params, opt, args.steps, seed=args.seed)
    _check_finite(np.asarray(res.losses), "training loss")
    save_checkpoint(args.out_ckpt, res.params, args.seed)
    with open(args.out_curve, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "topk_overlap", "random_overlap"])
        for i, row in enumerate(zip(res.losses, res.overlaps, res.baseline_overlaps)):
            w.writerow([i, repr(row[0]), repr(row[1]), repr(row[2])])
    tail = max(1, len(res.losses) // 4)
    print(json.dumps({
        "steps": args.steps,
        "final_loss": res.losses[-1] if res.losses else None,
        "tail_mean_overlap": float(np.mean(res.overlaps[-tail:])) if res.overlaps else None,
        "tail_mean_random_overlap": float(np.mean(res.baseline_overlaps[-tail:])) if res.overlaps else None,
    }, sort_keys=True))
    return 0


def cmd_histogram(args) -> int:
    p = _as_bnld(read_tensor(args.p))
    counts = argmax_histogram(p)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_bin"] + [f"key_bin_{j}" for j in range(counts.shape[1])])
    for i, row in enumerate(counts):
        w.writerow([i] + [int(c) for c in row])
    Path(args.out).write_text(buf.getvalue())
    print(json.dumps({"total": int(counts.sum()), "diagonal_share": float(np.trace(counts) / counts.sum())}, sort_keys=True))
    return 0


def cmd_overlap(args) -> int:
    a = read_tensor(args.a).astype(np.float64)
    b = read_tensor(args.b).astype(np.float64)
    print(repr(topk_overlap(a, b, args.k)))
    return 0


def cmd_planted(args) -> int:
    cfg = _config(args.config)
    table = planted_salience_benchmark(cfg, range(args.seed, args.seed + args.seeds), args.frames, workers=args.workers)
    print(json.dumps(table, sort_keys=True))
    return 0


def _measure(fn):
    tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    started = time.perf_counter()
    fn()
    elapsed = time.perf_counter() - started
    peak = tracemalloc.get_traced_memory()[1] - base
    tracemalloc.stop()
    return elapsed, peak


def bench_working_set(length: int, block_len: int, chunk_len: int, heads: int = 1, head_dim: int = 16, seed: int = 0) -> dict:
    """Attention-row buffer sizes (elements) and traced peak bytes for the dense and streaming paths."""
    rng = np.random.default_rng(seed)
    batch = AttentionBatch(rng.standard_normal((1, heads, length, head_dim)), rng.standard_normal((1, heads, length, head_dim)))
    geom = BlockGeometry(length, block_len)
    stats: dict = {}
    t_dense, peak_dense = _measure(lambda: fuse_salience(component_maxima(attention_weights(batch), geom), geom))
    t_stream, peak_stream = _measure(lambda: blockwise_salience(batch, geom, chunk_len, stats=stats))
    return {
        "len": length,
        "block_len": block_len,
        "chunk_len": chunk_len,
        "dense_row_elements": heads * length * length,
        "stream_row_elements": stats["peak_row_elements"],
        "dense_peak_bytes": peak_dense,
        "stream_peak_bytes": peak_stream,
        "dense_seconds": t_dense,
        "stream_seconds": t_stream,
    }


def cmd_bench(args) -> int:
    res = bench_working_set(args.len, args.block_len, args.chunk_len, seed=args.seed)
    # traced bytes and timings vary run to run; keep stdout reproducible
    volatile = {k: res.pop(k) for k in ("dense_peak_bytes", "stream_peak_bytes", "dense_seconds", "stream_seconds")}
    print(json.dumps(res, sort_keys=True))
    print(json.dumps(volatile, sort_keys=True), file=sys.stderr)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="salkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("salience", help="block salience of a q/k tensor pair")
    p.add_argument("--q", required=True)
    p.add_argument("--k", required=True)
    p.add_argument("--block-len", type=int, required=True)
    p.add_argument("--chunk-len", type=int)
    p.add_argument("--head-order", choices=("max-mean", "mean-max"), default="max-mean")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_salience)

    p = sub.add_parser("simulate", help="toy rollout under an eviction policy")
    p.add_argument("--config")
    p.add_argument("--policy", choices=POLICIES, default="salience")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out-trace", required=True)
    p.add_argument("--seh", help="checkpoint directory; score with the salience head instead of the oracle")
    p.add_argument("--timing", action="store_true", help="add per-chunk wall time to the trace")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-seh", help="fit the salience head on toy rollouts")
    p.add_argument("--config")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--out-curve", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="attention diagnostics")
    asub = p.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    h = asub.add_parser("histogram")
    h.add_argument("--p", required=True)
    h.add_argument("--out", required=True)
    common(h)
    h.set_defaults(func=cmd_histogram)
    o = asub.add_parser("overlap")
    o.add_argument("--a", required=True)
    o.add_argument("--b", required=True)
    o.add_argument("--k", type=int, required=True)
    common(o)
    o.set_defaults(func=cmd_overlap)

    p = sub.add_parser("planted", help="anchor-recall benchmark across policies")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--frames", type=int, default=18)
    p.add_argument("--workers", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_planted)

    p = sub.add_parser("bench", help="dense vs streaming salience working set")
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--block-len", type=int, required=True)
    p.add_argument("--chunk-len", type=int, required=True)
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CapacityError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        # non-finite inputs
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 3
    except (ShapeError, ValueError) as exc:
        print(f"error: input: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
