"""Split content/style classifier-free guidance."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Ramp(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR_THIRD = "linear_third"


@dataclass(frozen=True)
class GuidanceConfig:
    omega1: float = 15.0
    omega2_max: float = 15.0
    ramp: Ramp = Ramp.LINEAR_THIRD

    def __post_init__(self):
        object.__setattr__(self, "ramp", Ramp(self.ramp))
        for name in ("omega1", "omega2_max"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")


def combine(
    eps_uncond: np.ndarray,
    eps_content: np.ndarray,
    eps_style: np.ndarray,
    omega1: float,
    omega2: float,
) -> np.ndarray:
    """Unconditional prediction pushed along the content and style directions.

    ``eps_content`` is the text-conditioned prediction with injection,
    ``eps_style`` the null-conditioned prediction with injection and
    ``eps_uncond`` the null-conditioned prediction without it.
    """
    if not eps_uncond.shape == eps_content.shape == eps_style.shape:
        raise ValueError(
            f"shape mismatch: {eps_uncond.shape}, {eps_content.shape}, {eps_style.shape}"
        )
    return (
        eps_uncond
        + omega1 * (eps_content - eps_uncond)
        + omega2 * (eps_style - eps_uncond)
    )


def omega2_at(cfg: GuidanceConfig, step_index: int, total_steps: int) -> float:
    if not 0 <= step_index < total_steps:
        raise ValueError(f"step_index {step_index} outside [0, {total_steps})")
    w = cfg.omega2_max
    if cfg.ramp is Ramp.CONSTANT or total_steps == 1:
        return w
    if step_index == total_steps - 1:
        return w
    start = w / 3.0
    return start + (step_index / (total_steps - 1)) * (w - start)
