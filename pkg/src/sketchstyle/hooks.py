"""Attention hooks that record reference features or inject them into a target pass."""
from __future__ import annotations

import numpy as np

from .attention import FeatureCache, InjectionConfig, InjectionMode, RefFeatures, multihead_attention
from .backends import AttentionHooks, LayerDescriptor


class CaptureHooks(AttentionHooks):
    """Record Q/K/V on selected layers without changing the forward pass."""

    def __init__(self, layer_ids, keep_queries: bool = True):
        self.layer_ids = frozenset(layer_ids)
        self.keep_queries = keep_queries
        self.captured: dict[int, RefFeatures] = {}

    def attend(self, layer: LayerDescriptor, timestep, q, k, v, heads):
        if layer.layer_id in self.layer_ids:
            self.captured[layer.layer_id] = RefFeatures(
                k.astype(np.float32),
                v.astype(np.float32),
                q.astype(np.float32) if self.keep_queries else None,
            )
        return multihead_attention(q, k, v, heads)


class InjectionHooks(AttentionHooks):
    """Attend over target features stacked with cached reference features."""

    def __init__(self, cache: FeatureCache, cfg: InjectionConfig, timestep: int):
        self.cache = cache
        self.cfg = cfg
        self.timestep = timestep

    def attend(self, layer: LayerDescriptor, timestep, q, k, v, heads):
        if self.cfg.mode is InjectionMode.NONE or layer.layer_id not in self.cfg.layer_ids:
            return multihead_attention(q, k, v, heads)
        refs = self.cache.get(layer.layer_id, self.timestep)
        return multihead_attention(q, k, v, heads, refs, self.cfg)
