"""Self-attention with reference key/value injection.

Feature matrices are ``(tokens, inner_dim)``; multi-head layers split the
inner dimension into ``heads`` equal slices and inject per head.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .modulation import adain


class InjectionMode(str, enum.Enum):
    NONE = "none"
    KV_SWAP = "kv_swap"
    CONCAT = "concat"
    CONCAT_SMOOTHED = "concat_smoothed"
    ADAIN_QK_CONCAT = "adain_qk_concat"


@dataclass(frozen=True)
class AttentionFeatures:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        if self.Q.ndim != 2 or self.K.ndim != 2 or self.V.ndim != 2:
            raise ValueError("Q, K, V must be 2-D (tokens x dim)")
        if self.Q.shape[1] != self.K.shape[1]:
            raise ValueError(f"Q and K key dims differ: {self.Q.shape[1]} vs {self.K.shape[1]}")
        if self.K.shape[0] != self.V.shape[0]:
            raise ValueError(f"K and V token counts differ: {self.K.shape[0]} vs {self.V.shape[0]}")

    @property
    def d_k(self) -> int:
        return self.K.shape[1]


@dataclass(frozen=True)
class InjectionConfig:
    lam: float = 0.1
    mode: InjectionMode = InjectionMode.CONCAT_SMOOTHED
    layer_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "mode", InjectionMode(self.mode))
        object.__setattr__(self, "layer_ids", frozenset(int(i) for i in self.layer_ids))
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(Q: np.ndarray, K: np.ndarray) -> np.ndarray:
    d_k = K.shape[-1]
    if d_k == 0:
        raise ValueError("key dimension d_k must be positive")
    return softmax(Q @ K.T / math.sqrt(d_k), axis=-1)


def standard_attention(f: AttentionFeatures) -> np.ndarray:
    return attention_weights(f.Q, f.K) @ f.V


def smooth_features(K_tar: np.ndarray, K_ref: np.ndarray, lam: float) -> np.ndarray:
    if K_tar.shape != K_ref.shape:
        raise ValueError(
            f"cannot smooth features of shape {K_ref.shape} toward {K_tar.shape}; "
            "references must share the target latent resolution"
        )
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * K_tar + (1.0 - lam) * K_ref


@dataclass(frozen=True)
class RefFeatures:
    """One reference's cached features for a single layer and timestep."""

    K: np.ndarray
    V: np.ndarray
    Q: np.ndarray | None = None


def injected_attention(
    target: AttentionFeatures, refs: Sequence[RefFeatures], cfg: InjectionConfig
) -> np.ndarray:
    mode = cfg.mode
    if mode is InjectionMode.NONE:
        return standard_attention(target)
    if not refs:
        raise ValueError(f"injection mode {mode.value} needs at least one reference")
    if mode is InjectionMode.KV_SWAP:
        if len(refs) != 1:
            raise ValueError(f"kv_swap takes exactly one reference, got {len(refs)}")
        return standard_attention(AttentionFeatures(target.Q, refs[0].K, refs[0].V))

    Q, K_tar, V_tar = target.Q, target.K, target.V
    if mode is InjectionMode.ADAIN_QK_CONCAT:
        lead = refs[0]
        if lead.Q is None:
            raise ValueError("adain_qk_concat needs cached reference queries")
        Q = adain(Q, lead.Q, channel_axis=-1)
        K_tar = adain(K_tar, lead.K, channel_axis=-1)

    keys, values = [K_tar], [V_tar]
    for ref in refs:
        if ref.K.shape[1] != K_tar.shape[1] or ref.V.shape[1] != V_tar.shape[1]:
            raise ValueError("reference feature width differs from target")
        if mode is InjectionMode.CONCAT_SMOOTHED:
            keys.append(smooth_features(target.K, ref.K, cfg.lam))
            values.append(smooth_features(target.V, ref.V, cfg.lam))
        else:
            keys.append(ref.K)
            values.append(ref.V)
    return standard_attention(AttentionFeatures(Q, np.concatenate(keys), np.concatenate(values)))


def split_heads(x: np.ndarray, heads: int) -> list[np.ndarray]:
    if x.shape[1] % heads:
        raise ValueError(f"inner dim {x.shape[1]} not divisible by {heads} heads")
    return np.split(x, heads, axis=1)


def multihead_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    refs: Sequence[RefFeatures] = (),
    cfg: InjectionConfig | None = None,
) -> np.ndarray:
    """Per-head attention, optionally with reference injection."""
    qs, ks, vs = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    if cfg is None or cfg.mode is InjectionMode.NONE:
        outs = [standard_attention(AttentionFeatures(*qkv)) for qkv in zip(qs, ks, vs)]
    else:
        per_ref = [
            (
                split_heads(r.K, heads),
                split_heads(r.V, heads),
                split_heads(r.Q, heads) if r.Q is not None else [None] * heads,
            )
            for r in refs
        ]
        outs = []
        for h in range(heads):
            head_refs = [RefFeatures(rk[h], rv[h], rq[h]) for rk, rv, rq in per_ref]
            outs.append(injected_attention(AttentionFeatures(qs[h], ks[h], vs[h]), head_refs, cfg))
    return np.concatenate(outs, axis=1)


def select_layers(backend, policy: str, arg: Iterable) -> frozenset[int]:
    """Resolve injection layers by decoder resolution or by explicit ids."""
    descriptors = backend.attention_layers()
    valid = [d.layer_id for d in descriptors]
    if policy == "explicit":
        ids = [int(i) for i in arg]
        unknown = sorted(set(ids) - set(valid))
        if unknown:
            raise ValueError(f"unknown layer ids {unknown}; valid ids are {valid}")
        return frozenset(ids)
    if policy == "by_resolution":
        wanted = {tuple(r) for r in arg}
        return frozenset(
            d.layer_id for d in descriptors if d.location == "decoder" and d.resolution in wanted
        )
    raise ValueError(f"unknown layer policy {policy!r}")


# -- feature cache ---------------------------------------------------------

MAGIC = b"SKFC01"
_HEADER = struct.Struct("<6sI")
_ENTRY = struct.Struct("<iiiIII")


@dataclass
class FeatureCache:
    """Reference features keyed by ``(layer_id, timestep)``, one item per reference."""

    entries: dict[tuple[int, int], list[RefFeatures]] = field(default_factory=dict)

    def put(self, layer_id: int, timestep: int, ref_index: int, feats: RefFeatures) -> None:
        slot = self.entries.setdefault((layer_id, timestep), [])
        while len(slot) <= ref_index:
            slot.append(None)
        slot[ref_index] = feats

    def get(self, layer_id: int, timestep: int) -> list[RefFeatures]:
        try:
            refs = self.entries[(layer_id, timestep)]
        except KeyError:
            raise KeyError(f"feature cache miss at layer {layer_id}, timestep {timestep}") from None
        if any(r is None for r in refs):
            raise KeyError(f"incomplete cache slot at layer {layer_id}, timestep {timestep}")
        return refs

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    @property
    def layer_ids(self) -> list[int]:
        return sorted({l for l, _ in self.entries})

    @property
    def timesteps(self) -> list[int]:
        return sorted({t for _, t in self.entries}, reverse=True)

    @property
    def num_refs(self) -> int:
        return max((len(v) for v in self.entries.values()), default=0)

    def save(self, path: str | Path) -> None:
        """Write the little-endian float32 container.

        Per entry: layer_id, timestep, ref_index (int32), rows, cols,
        has_query (uint32), then K, V and optionally Q as row-major float32.
        """
        items = sorted(
            ((l, t, i, r) for (l, t), refs in self.entries.items() for i, r in enumerate(refs)),
            key=lambda e: (e[0], -e[1], e[2]),
        )
        chunks = [_HEADER.pack(MAGIC, len(items))]
        for layer, t, i, ref in items:
            rows, cols = ref.K.shape
            chunks.append(_ENTRY.pack(layer, t, i, rows, cols, int(ref.Q is not None)))
            for arr in (ref.K, ref.V) + ((ref.Q,) if ref.Q is not None else ()):
                if arr.shape != (rows, cols):
                    raise ValueError(f"cached tensor shape {arr.shape} != ({rows}, {cols})")
                chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(b"".join(chunks))
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureCache":
        buf = Path(path).read_bytes()
        try:
            return cls._parse(buf, path)
        except struct.error as exc:
            raise ValueError(f"{path}: truncated feature cache ({exc})") from None

    @classmethod
    def _parse(cls, buf: bytes, path) -> "FeatureCache":
        magic, count = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a feature cache (magic {magic!r})")
        off = _HEADER.size
        cache = cls()
        for _ in range(count):
            layer, t, i, rows, cols, has_q = _ENTRY.unpack_from(buf, off)
            off += _ENTRY.size
            n = rows * cols
            tensors = []
            for _ in range(3 if has_q else 2):
                if off + 4 * n > len(buf):
                    raise ValueError(f"{path}: truncated feature cache")
                arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(rows, cols)
                tensors.append(arr.copy())
                off += 4 * n
            cache.put(layer, t, i, RefFeatures(*tensors))
        if off != len(buf):
            raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
        return cache
