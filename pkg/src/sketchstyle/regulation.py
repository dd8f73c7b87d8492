"""Edge-sharpening regulation of the clean-latent estimate via Sobel gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scheduler import LatentState

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
SOBEL_X.setflags(write=False)
SOBEL_Y.setflags(write=False)


@dataclass(frozen=True)
class RegulationConfig:
    gamma: float = 60.0
    clamp: float = 1e-3
    enabled: bool = False
    active_window: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "active_window", tuple(float(w) for w in self.active_window))
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not (self.clamp > 0 and math.isfinite(self.clamp)):
            raise ValueError(f"clamp must be a positive bound, got {self.clamp}")
        start, end = self.active_window
        if not 0.0 <= start < end <= 1.0:
            raise ValueError(f"active_window: need 0 <= start < end <= 1, got {self.active_window}")

    def active_at(self, step_index: int, total_steps: int) -> bool:
        if not self.enabled:
            return False
        frac = step_index / total_steps
        return self.active_window[0] <= frac < self.active_window[1]


# responses this small are decoder roundoff, not edges
FLAT_TOLERANCE = 1e-10


def _pad_edge(image: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (image.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(image, pad, mode="edge")


def _fold_edge(padded: np.ndarray) -> np.ndarray:
    """Adjoint of edge-replicate padding: fold the border back onto edge pixels."""
    padded = padded.copy()
    h, w = padded.shape[-2] - 2, padded.shape[-1] - 2
    padded[..., 1, :] += padded[..., 0, :]
    padded[..., h, :] += padded[..., h + 1, :]
    padded[..., :, 1] += padded[..., :, 0]
    padded[..., :, w] += padded[..., :, w + 1]
    return padded[..., 1 : h + 1, 1 : w + 1]


def sobel_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-correlate every channel with the Sobel pair, replicating edge pixels.

    Accepts ``(h, w)`` or ``(channels, h, w)``; outputs keep the input shape.
    Evaluated as smoothed central differences, so flat regions give exact zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3) or image.shape[-1] < 3 or image.shape[-2] < 3:
        raise ValueError(f"Sobel needs at least 3x3 spatial extent, got shape {image.shape}")
    p = _pad_edge(image)
    dx = p[..., :, 2:] - p[..., :, :-2]
    dy = p[..., 2:, :] - p[..., :-2, :]
    gx = dx[..., :-2, :] + 2.0 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = dy[..., :, :-2] + 2.0 * dy[..., :, 1:-1] + dy[..., :, 2:]
    return gx, gy


def _sobel_adjoint(gx_bar: np.ndarray, gy_bar: np.ndarray) -> np.ndarray:
    h, w = gx_bar.shape[-2:]
    lead = gx_bar.shape[:-2]
    dx_bar = np.zeros(lead + (h + 2, w))
    dx_bar[..., :-2, :] += gx_bar
    dx_bar[..., 1:-1, :] += 2.0 * gx_bar
    dx_bar[..., 2:, :] += gx_bar
    dy_bar = np.zeros(lead + (h, w + 2))
    dy_bar[..., :, :-2] += gy_bar
    dy_bar[..., :, 1:-1] += 2.0 * gy_bar
    dy_bar[..., :, 2:] += gy_bar
    p_bar = np.zeros(lead + (h + 2, w + 2))
    p_bar[..., :, 2:] += dx_bar
    p_bar[..., :, :-2] -= dx_bar
    p_bar[..., 2:, :] += dy_bar
    p_bar[..., :-2, :] -= dy_bar
    return _fold_edge(p_bar)


def edge_loss(gx: np.ndarray, gy: np.ndarray) -> float:
    if gx.shape != gy.shape:
        raise ValueError(f"shape mismatch: {gx.shape} vs {gy.shape}")
    return -float(np.abs(gx).sum()) - float(np.abs(gy).sum())


def clamped_edge_terms(image: np.ndarray, clamp: float):
    """Clamped gradients and the loss gradient with respect to the image."""
    gx, gy = sobel_gradients(image)
    cx, cy = np.clip(gx, -clamp, clamp), np.clip(gy, -clamp, clamp)
    # d(-|clip(g)|)/dg: -sign(g) inside the clamp band, zero where clipped
    gx_bar = -np.sign(gx) * ((np.abs(gx) <= clamp) & (np.abs(gx) > FLAT_TOLERANCE))
    gy_bar = -np.sign(gy) * ((np.abs(gy) <= clamp) & (np.abs(gy) > FLAT_TOLERANCE))
    return cx, cy, _sobel_adjoint(gx_bar, gy_bar)


def regulate(z0_hat: LatentState, backend, cfg: RegulationConfig) -> LatentState:
    """One clamped edge-loss gradient step on a clean-latent estimate."""
    if not cfg.enabled or cfg.gamma == 0:
        return z0_hat
    if not callable(getattr(backend, "decode_vjp", None)):
        raise TypeError(f"{type(backend).__name__} does not provide decode_vjp")
    image = backend.decode(z0_hat)
    _, _, image_grad = clamped_edge_terms(image, cfg.clamp)
    latent_grad = backend.decode_vjp(z0_hat, image_grad)
    return LatentState(z0_hat.data - cfg.gamma * latent_grad, z0_hat.timestep, z0_hat.role)
