"""Salience-driven KV-cache eviction for chunk-wise autoregressive attention."""

from .attention import AttentionBatch, attention_output, attention_weights, softmax
from .errors import CapacityError, FormatError, ShapeError, ValidationError
from .kv_cache import EvictionReport, KvCache, fifo_evict, set_policy_scores, top_k_indices
from .metrics import argmax_histogram, retained_attention_mass, topk_overlap
from .salience import (
    BlockGeometry,
    ComponentMaxima,
    block_bounds,
    blockwise_salience,
    component_maxima,
    fuse_salience,
    salience_scores,
)
from .seh import OptimizerState, SehParams, seh_backward, seh_features, seh_forward, seh_train_step, smooth_l1

__version__ = "0.1.0"
