"""Run configuration read from a flat ``key = value`` text file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .kv_cache import POLICIES


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    heads: int = 4
    head_dim: int = 16
    layers: int = 2
    frame_tokens: int = 64
    chunk_frames: int = 3
    capacity: int = 576  # three chunks
    block_len: int = 0  # 0 -> one chunk
    policy: str = "salience"
    scorer: str = "oracle"  # "oracle" (dense block salience) or "seh"
    evict_order: str = "concat"
    sink_count: int = 64  # one frame
    timesteps: tuple = (1.0, 0.75, 0.5, 0.25)
    logit_scale: float = 1.0
    anchor_ids: tuple = ()
    anchor_bias: float = 0.0
    seh_hidden: int = 64
    seh_out: int = 12
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    smooth_l1_beta: float = 1.0
    train_frames: int = 0  # 0 -> three chunks per training rollout

    @property
    def chunk_tokens(self) -> int:
        return self.frame_tokens * self.chunk_frames

    @property
    def effective_block_len(self) -> int:
        return self.block_len or self.chunk_tokens

    @property
    def seh_in(self) -> int:
        return 3 * self.heads * self.head_dim

    def validate(self) -> "RunConfig":
        if self.capacity < self.chunk_tokens:
            raise ConfigError(
                f"capacity {self.capacity} is smaller than one chunk ({self.chunk_tokens} tokens)"
            )
        if self.chunk_tokens > self.capacity - self.sink_count:
            raise ConfigError(
                f"chunk of {self.chunk_tokens} tokens does not fit next to {self.sink_count} pinned tokens "
                f"in capacity {self.capacity}"
            )
        if self.effective_block_len < 1:
            raise ConfigError("block_len must be >= 1")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.scorer not in ("oracle", "seh"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        ts = list(self.timesteps)
        if not ts or any(b >= a for a, b in zip(ts, ts[1:])) or ts[-1] < 0 or ts[0] > 1:
            raise ConfigError("timesteps must be strictly decreasing within [0, 1]")
        for name in ("heads", "head_dim", "layers", "frame_tokens", "chunk_frames", "seh_hidden", "seh_out"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def full_scale() -> RunConfig:
    """Settings at the published model scale: 12 heads x 128 dims, 1560 tokens per frame."""
    return RunConfig(
        heads=12,
        head_dim=128,
        frame_tokens=1560,
        chunk_frames=3,
        capacity=4680,
        block_len=4680,
        sink_count=0,
        seh_hidden=1024,
        seh_out=12,
        lr=1e-5,
    )


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            conv = int if name == "anchor_ids" else float
            return tuple(conv(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    known = {f.name: f for f in dataclasses.fields(RunConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, raw, getattr(cfg, key))
    return cfg.replace(**updates).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ", ".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
