"""Reference sketch loading, DDIM inversion and feature-cache construction."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .attention import FeatureCache
from .hooks import CaptureHooks
from .scheduler import (
    CLEAN,
    LatentState,
    NoiseSchedule,
    Role,
    TimestepGrid,
    ddim_invert_step,
)


@dataclass
class ReferenceBundle:
    image: np.ndarray
    trajectory: dict[int, LatentState]
    cache_index: int = 0
    # noise predictions used to climb to each timestep, kept for exact replay
    noise: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def at(self, t: int) -> LatentState:
        try:
            return self.trajectory[t]
        except KeyError:
            raise KeyError(f"reference {self.cache_index} has no latent at timestep {t}") from None


def load_image(path: str | Path, shape: tuple[int, int, int]) -> np.ndarray:
    """Read an 8-bit PNG, resize to ``shape`` and map pixel values to [-1, 1]."""
    channels, h, w = shape
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        if im.size != (w, h):
            im = im.resize((w, h), Image.Resampling.BILINEAR)
        arr = np.asarray(im, dtype=np.float64)
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return arr / 127.5 - 1.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write a [-1, 1] image as an 8-bit PNG, atomically."""
    arr = np.clip((np.asarray(image) + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(arr).save(tmp, format="PNG")
    tmp.replace(path)


def invert_reference(
    image: np.ndarray,
    backend,
    sched: NoiseSchedule,
    grid: TimestepGrid,
    cache_index: int = 0,
    refine_iters: int = 0,
) -> ReferenceBundle:
    """Encode ``image`` and climb the grid with null-conditioned DDIM inversion.

    The noise prediction for the step ``t -> t_next`` is evaluated at
    ``(z_t, t_next)``.  ``refine_iters > 0`` re-evaluates it at the current
    estimate of ``z_t_next`` that many times (fixed-point inversion), which
    makes fresh re-sampling reproduce the clean latent more closely.
    """
    z0 = backend.encode(image)
    z = LatentState(z0.data, CLEAN, Role.REFERENCE)
    null = backend.null_conditioning()
    trajectory = {CLEAN: z}
    noise = {}
    t = CLEAN
    for t_next in reversed(grid.steps):
        eps = backend.predict_noise(z, t_next, null)
        z_next = ddim_invert_step(z, eps, t, t_next, sched)
        for _ in range(refine_iters):
            eps = backend.predict_noise(z_next, t_next, null)
            z_next = ddim_invert_step(z, eps, t, t_next, sched)
        z, t = z_next, t_next
        trajectory[t] = z
        noise[t] = eps
    return ReferenceBundle(np.array(image, copy=True), trajectory, cache_index, noise)


def build_feature_cache(
    bundles: Sequence[ReferenceBundle], backend, layer_ids, grid: TimestepGrid
) -> FeatureCache:
    """Capture per-layer reference Q/K/V by denoising each stored latent once."""
    if not bundles:
        raise ValueError("at least one reference bundle is required")
    valid = {d.layer_id for d in backend.attention_layers()}
    unknown = sorted(set(layer_ids) - valid)
    if unknown:
        raise ValueError(f"unknown layer ids {unknown}; valid ids are {sorted(valid)}")
    null = backend.null_conditioning()
    cache = FeatureCache()
    for ref_index, bundle in enumerate(bundles):
        for t in grid:
            hooks = CaptureHooks(layer_ids)
            backend.predict_noise(bundle.at(t), t, null, hooks)
            for layer_id in sorted(layer_ids):
                cache.put(layer_id, t, ref_index, hooks.captured[layer_id])
    return cache


def save_trajectories(bundles: Sequence[ReferenceBundle], path: str | Path) -> None:
    arrays = {
        f"ref{b.cache_index}_t{t}": state.data
        for b in bundles
        for t, state in b.trajectory.items()
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_trajectories(path: str | Path) -> list[ReferenceBundle]:
    with np.load(path) as data:
        grouped: dict[int, dict[int, LatentState]] = {}
        for key in data.files:
            ref, t = key.split("_t")
            grouped.setdefault(int(ref[3:]), {})[int(t)] = LatentState(
                data[key], int(t), Role.REFERENCE
            )
    return [
        ReferenceBundle(np.empty(0), traj, idx) for idx, traj in sorted(grouped.items())
    ]
