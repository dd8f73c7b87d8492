"""Style and text-alignment metrics behind a pluggable feature extractor."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, runtime_checkable

import numpy as np


@runtime_checkable
class FeatureExtractor(Protocol):
    def features(self, image: np.ndarray) -> list[np.ndarray]: ...

    def embed(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, prompt: str) -> np.ndarray: ...


def gram_matrix(feature_map: np.ndarray) -> np.ndarray:
    c, h, w = feature_map.shape
    flat = feature_map.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


def gram_distance(a: np.ndarray, b: np.ndarray, fx: FeatureExtractor) -> float:
    """Mean over extractor layers of the mean squared Gram difference."""
    fa, fb = fx.features(a), fx.features(b)
    if len(fa) != len(fb) or not fa:
        raise ValueError("extractor returned mismatched or empty feature lists")
    per_layer = [np.mean((gram_matrix(x) - gram_matrix(y)) ** 2) for x, y in zip(fa, fb)]
    return float(np.mean(per_layer))


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cannot take cosine similarity of a zero-norm embedding")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def embedding_similarity(a: np.ndarray, b: np.ndarray, fx: FeatureExtractor) -> float:
    return _cosine(fx.embed(a), fx.embed(b))


def text_alignment(image: np.ndarray, prompt: str, fx: FeatureExtractor) -> float:
    return _cosine(fx.embed(image), fx.embed_text(prompt))


def _conv_valid(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    # x: (c_in, h, w); kernels: (c_out, c_in, k, k)
    c_out, c_in, k, _ = kernels.shape
    h, w = x.shape[1] - k + 1, x.shape[2] - k + 1
    patches = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    return np.einsum("chwij,ocij->ohw", patches[:, :h, :w], kernels)


@dataclass(frozen=True)
class RandomConvExtractor:
    """Seeded stack of random 3x3 conv + ReLU layers with 2x average pooling.

    ``features`` returns each layer's activation map; ``embed`` concatenates
    per-channel means and stds of the last map.
    """

    seed: int = 0
    channels: tuple[int, ...] = (8, 16)
    in_channels: int = 1
    kernels: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        ks, c_in = [], self.in_channels
        for c_out in self.channels:
            ks.append(rng.standard_normal((c_out, c_in, 3, 3)) / math.sqrt(9 * c_in))
            c_in = c_out
        object.__setattr__(self, "kernels", ks)

    @property
    def embed_dim(self) -> int:
        return 2 * self.channels[-1]

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        out = []
        for k in self.kernels:
            x = np.maximum(_conv_valid(x, k), 0.0)
            out.append(x)
            h, w = (x.shape[1] // 2) * 2, (x.shape[2] // 2) * 2
            if h >= 2 and w >= 2:
                x = x[:, :h, :w].reshape(x.shape[0], h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        return out

    def embed(self, image: np.ndarray) -> np.ndarray:
        last = self.features(image)[-1]
        flat = last.reshape(last.shape[0], -1)
        return np.concatenate([flat.mean(axis=1), flat.std(axis=1)])

    def embed_text(self, prompt: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
        return np.random.default_rng(seed ^ self.seed).standard_normal(self.embed_dim)


def metric_report(
    run_id: str,
    image: np.ndarray,
    prompt: str,
    references: Iterable[np.ndarray],
    fx: FeatureExtractor,
) -> list[tuple[str, str, float]]:
    rows = [(run_id, "text_alignment", text_alignment(image, prompt, fx))]
    for k, ref in enumerate(references, start=1):
        rows.append((run_id, f"embedding_similarity_ref{k}", embedding_similarity(image, ref, fx)))
        rows.append((run_id, f"gram_distance_ref{k}", gram_distance(image, ref, fx)))
    return rows


def write_report(rows: Iterable[tuple[str, str, float]], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "metric", "value"])
        for run_id, name, value in rows:
            writer.writerow([run_id, name, repr(float(value))])
    tmp.replace(path)
