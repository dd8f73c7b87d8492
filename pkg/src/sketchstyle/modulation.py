"""AdaIN statistics alignment and the multi-reference style-tendency blend."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scheduler import LatentState

STD_EPS = 1e-6


def _stats(x: np.ndarray, channel_axis: int) -> tuple[np.ndarray, np.ndarray]:
    axes = tuple(a for a in range(x.ndim) if a != channel_axis % x.ndim)
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return mean, var


def adain(x: np.ndarray, y: np.ndarray, channel_axis: int = 0) -> np.ndarray:
    """Give ``x`` the per-channel mean and std of ``y``.

    Statistics are taken over every axis except ``channel_axis`` using the
    population variance; ``STD_EPS`` is added under the square root.
    """
    if x.shape[channel_axis] != y.shape[channel_axis]:
        raise ValueError(
            f"channel count mismatch: {x.shape[channel_axis]} vs {y.shape[channel_axis]}"
        )
    mx, vx = _stats(x, channel_axis)
    my, vy = _stats(y, channel_axis)
    bad = np.flatnonzero(np.sqrt(vx) < STD_EPS)
    if bad.size:
        raise ValueError(f"degenerate channel {int(bad[0])}: std below {STD_EPS}")
    return np.sqrt(vy + STD_EPS) * (x - mx) / np.sqrt(vx + STD_EPS) + my


@dataclass(frozen=True)
class StyleBlendConfig:
    eta: tuple[float, ...] = (1.0,)
    active_window: tuple[float, float] = (0.0, 1.0)
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "eta", tuple(float(e) for e in self.eta))
        object.__setattr__(self, "active_window", tuple(float(w) for w in self.active_window))
        if not self.eta:
            raise ValueError("eta: at least one blend weight required")
        if any(not 0.0 <= e <= 1.0 for e in self.eta):
            raise ValueError(f"eta: weights must lie in [0, 1], got {self.eta}")
        if abs(sum(self.eta) - 1.0) > 1e-9:
            raise ValueError(f"eta: weights must sum to 1, got {sum(self.eta)}")
        start, end = self.active_window
        if not 0.0 <= start < end <= 1.0:
            raise ValueError(f"active_window: need 0 <= start < end <= 1, got {self.active_window}")

    @classmethod
    def two_way(cls, eta: float, **kw) -> "StyleBlendConfig":
        return cls(eta=(eta, 1.0 - eta), **kw)

    def active_at(self, step_index: int, total_steps: int) -> bool:
        if not self.enabled:
            return False
        frac = step_index / total_steps
        return self.active_window[0] <= frac < self.active_window[1]


def joint_adain(
    z_tar: LatentState, refs: Sequence[LatentState], cfg: StyleBlendConfig
) -> LatentState:
    if len(refs) != len(cfg.eta):
        raise ValueError(f"{len(refs)} references but {len(cfg.eta)} blend weights")
    for k, ref in enumerate(refs):
        if ref.timestep != z_tar.timestep:
            raise ValueError(
                f"reference {k} is at t={ref.timestep}, target at t={z_tar.timestep}"
            )
        if ref.shape != z_tar.shape:
            raise ValueError(f"reference {k} shape {ref.shape} != target {z_tar.shape}")
    # a weight of exactly 1 must reproduce plain adain bit for bit
    if 1.0 in cfg.eta:
        k = cfg.eta.index(1.0)
        return LatentState(adain(z_tar.data, refs[k].data), z_tar.timestep, z_tar.role)
    out = np.zeros_like(z_tar.data)
    for w, ref in zip(cfg.eta, refs):
        if w:
            out = out + w * adain(z_tar.data, ref.data)
    return LatentState(out, z_tar.timestep, z_tar.role)
