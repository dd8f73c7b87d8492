"""Denoiser backend contract and the built-in toy backbone."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

from .attention import multihead_attention
from .scheduler import CLEAN, LatentState, NoiseSchedule, Role, build_schedule


@dataclass(frozen=True)
class Conditioning:
    kind: str  # "text" or "null"
    embedding: np.ndarray
    prompt: str = ""

    def __eq__(self, other):
        if not isinstance(other, Conditioning):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.prompt == other.prompt
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None


@dataclass(frozen=True)
class LayerDescriptor:
    layer_id: int
    resolution: tuple[int, int]
    location: str  # "encoder", "decoder" or "middle"


class AttentionHooks:
    """Per-call interception point for self-attention layers.

    The base class neither captures nor injects; subclasses override
    :meth:`attend` to record features or to replace the attention output.
    """

    def attend(
        self,
        layer: LayerDescriptor,
        timestep: int,
        q: np.ndarray,
        k: np.ndarray,
        v: np.ndarray,
        heads: int,
    ) -> np.ndarray:
        return multihead_attention(q, k, v, heads)


@runtime_checkable
class DenoiserBackend(Protocol):
    def predict_noise(
        self, z: LatentState, t: int, c: Conditioning, hooks: AttentionHooks | None = None
    ) -> np.ndarray: ...

    def attention_layers(self) -> list[LayerDescriptor]: ...

    def encode(self, image: np.ndarray) -> LatentState: ...

    def decode(self, z0: LatentState) -> np.ndarray: ...

    def decode_vjp(self, z0: LatentState, upstream: np.ndarray) -> np.ndarray: ...

    def latent_shape(self) -> tuple[int, int, int]: ...

    def image_shape(self) -> tuple[int, int, int]: ...

    def null_conditioning(self) -> Conditioning: ...

    def text_conditioning(self, prompt: str) -> Conditioning: ...


def null_conditioning(backend: DenoiserBackend) -> Conditioning:
    return backend.null_conditioning()


def _timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = max(t, 0) * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


def _prompt_seed(prompt: str) -> int:
    return int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")


@dataclass(frozen=True)
class ToyBackend:
    """Small fixed-weight denoiser with genuine softmax self-attention.

    The noise prediction is the exact posterior-mean noise for a Gaussian
    latent prior with std ``prior_std`` plus ``residual_scale`` times a
    network output.  In the network, spatial positions are tokens and each
    block is a residual multi-head self-attention layer followed by a
    residual per-pixel tanh MLP.  The
    image decoder is a per-pixel orthogonal map from the latent channels
    onto a ``patch x patch`` grayscale block, so it is linear, exactly
    invertible and its VJP is its transpose.
    """

    seed: int = 0
    shape: tuple[int, int, int] = (4, 8, 8)
    num_attention_layers: int = 2
    width: int = 16
    heads: int = 2
    embed_dim: int = 8
    cond_scale: float = 0.3
    prior_std: float = 1.0
    residual_scale: float = 0.1
    schedule: NoiseSchedule = field(default_factory=build_schedule, repr=False, compare=False)
    weights: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        c, h, w = self.shape
        if min(c, h, w) < 1:
            raise ValueError(f"latent shape must be positive, got {self.shape}")
        if self.num_attention_layers < 1:
            raise ValueError("num_attention_layers must be >= 1")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        patch = math.isqrt(c)
        if patch * patch != c:
            raise ValueError(f"toy decoder needs a square channel count, got {c}")
        rng = np.random.default_rng(self.seed)
        d = self.width

        def lin(n_in, n_out, gain=1.0):
            return rng.standard_normal((n_in, n_out)) * gain / math.sqrt(n_in)

        wts = {
            "in": lin(c, d),
            "time": lin(d, d, 0.5),
            "cond": lin(self.embed_dim, d, self.cond_scale),
            "out": lin(d, c),
            "layers": [
                {
                    "q": lin(d, d),
                    "k": lin(d, d),
                    "v": lin(d, d),
                    "o": lin(d, d, 0.5),
                    "m1": lin(d, d),
                    "m2": lin(d, d, 0.5),
                }
                for _ in range(self.num_attention_layers)
            ],
        }
        decoder, _ = np.linalg.qr(rng.standard_normal((c, c)))
        wts["decoder"] = decoder
        for arr in _walk(wts):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", wts)

    # -- contract ----------------------------------------------------------

    def latent_shape(self) -> tuple[int, int, int]:
        return tuple(self.shape)

    def image_shape(self) -> tuple[int, int, int]:
        c, h, w = self.shape
        p = math.isqrt(c)
        return (1, h * p, w * p)

    def attention_layers(self) -> list[LayerDescriptor]:
        res = (self.shape[1], self.shape[2])
        return [LayerDescriptor(i, res, "decoder") for i in range(self.num_attention_layers)]

    def null_conditioning(self) -> Conditioning:
        return Conditioning("null", np.zeros(self.embed_dim))

    def text_conditioning(self, prompt: str) -> Conditioning:
        emb = np.random.default_rng(_prompt_seed(prompt)).standard_normal(self.embed_dim)
        return Conditioning("text", emb, prompt)

    def predict_noise(
        self, z: LatentState, t: int, c: Conditioning, hooks: AttentionHooks | None = None
    ) -> np.ndarray:
        ch, h, w = self.shape
        if z.shape != (ch, h, w):
            raise ValueError(f"latent shape {z.shape} != backend shape {self.shape}")
        wts = self.weights
        x = z.data.reshape(ch, h * w).T
        bias = _timestep_embedding(t, self.width) @ wts["time"] + c.embedding @ wts["cond"]
        hid = x @ wts["in"] + bias
        for desc, lw in zip(self.attention_layers(), wts["layers"]):
            q, k, v = hid @ lw["q"], hid @ lw["k"], hid @ lw["v"]
            if hooks is None:
                att = multihead_attention(q, k, v, self.heads)
            else:
                att = hooks.attend(desc, t, q, k, v, self.heads)
            hid = hid + att @ lw["o"]
            hid = hid + np.tanh(hid @ lw["m1"]) @ lw["m2"]
        residual = np.tanh(hid @ wts["out"]).T.reshape(ch, h, w)
        ab = self.schedule.alpha_bar(t)
        var = ab * self.prior_std**2 + 1.0 - ab
        return math.sqrt(1.0 - ab) / var * z.data + self.residual_scale * residual

    def decode(self, z0: LatentState) -> np.ndarray:
        return self._decode_array(z0.data)

    def encode(self, image: np.ndarray) -> LatentState:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.image_shape():
            raise ValueError(f"image shape {image.shape} != backend image shape {self.image_shape()}")
        c, h, w = self.shape
        p = math.isqrt(c)
        blocks = image[0].reshape(h, p, w, p).transpose(1, 3, 0, 2).reshape(c, h, w)
        z = np.einsum("ji,jhw->ihw", self.weights["decoder"], blocks)
        return LatentState(z, CLEAN, Role.TARGET)

    def decode_vjp(self, z0: LatentState, upstream: np.ndarray) -> np.ndarray:
        # orthogonal per-pixel decoder: the VJP is the transpose, which is encode
        return self.encode(upstream).data

    def _decode_array(self, z: np.ndarray) -> np.ndarray:
        c, h, w = self.shape
        p = math.isqrt(c)
        blocks = np.einsum("ij,jhw->ihw", self.weights["decoder"], z)
        return blocks.reshape(p, p, h, w).transpose(2, 0, 3, 1).reshape(1, h * p, w * p)


def _walk(tree):
    if isinstance(tree, np.ndarray):
        yield tree
    elif isinstance(tree, dict):
        for v in tree.values():
            yield from _walk(v)
    elif isinstance(tree, (list, tuple)):
        for v in tree:
            yield from _walk(v)


def toy_backend(
    seed: int = 0, latent_shape: Sequence[int] = (4, 8, 8), num_attention_layers: int = 2
) -> ToyBackend:
    return ToyBackend(seed=seed, shape=tuple(latent_shape), num_attention_layers=num_attention_layers)


_ADAPTERS: dict[str, Callable[..., DenoiserBackend]] = {}


def register_adapter(name: str, factory: Callable[..., DenoiserBackend]) -> None:
    """Make a real-backbone adapter available as ``adapter:<name>``."""
    _ADAPTERS[name] = factory


def resolve_backend(spec: str, seed: int = 0) -> DenoiserBackend:
    if spec == "toy":
        return toy_backend(seed)
    if spec.startswith("adapter:"):
        name = spec.split(":", 1)[1]
        if name not in _ADAPTERS:
            raise ValueError(f"backend: no adapter named {name!r} (registered: {sorted(_ADAPTERS)})")
        return _ADAPTERS[name]()
    raise ValueError(f"backend: expected 'toy' or 'adapter:<name>', got {spec!r}")
