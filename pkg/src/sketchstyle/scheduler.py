"""Noise schedule, forward noising and deterministic DDIM stepping.

Timesteps index ``alpha_bars`` directly (``0 .. T-1``).  The clean endpoint,
where no noise has been accumulated, is the sentinel ``CLEAN == -1`` and has
``alpha_bar == 1``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

CLEAN = -1


class Role(str, enum.Enum):
    TARGET = "target"
    REFERENCE = "reference"
    Z0_ESTIMATE = "z0_estimate"


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at ``t``; ``1.0`` at the clean endpoint."""
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.num_train_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_train_steps - 1}]")
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class LatentState:
    data: np.ndarray
    timestep: int
    role: Role = Role.TARGET

    def __post_init__(self):
        if self.timestep < CLEAN:
            raise ValueError(f"invalid timestep {self.timestep}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"non-finite values in {self.role.value} latent at t={self.timestep}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True)
class TimestepGrid:
    steps: tuple[int, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("empty timestep grid")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("timestep grid must be strictly decreasing")

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i: int) -> int:
        return self.steps[i]

    def previous(self, i: int) -> int:
        """Timestep reached after denoising step ``i`` (``CLEAN`` after the last)."""
        return self.steps[i + 1] if i + 1 < len(self.steps) else CLEAN


def build_schedule(
    num_train_steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    if num_train_steps < 1:
        raise ValueError("num_train_steps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(num_train_steps, betas, alphas, alpha_bars)


def timestep_grid(sched: NoiseSchedule, num_inference_steps: int) -> TimestepGrid:
    """Evenly strided descending grid, e.g. ``[990, 980, ..., 0]`` for 100 of 1000."""
    n, total = num_inference_steps, sched.num_train_steps
    if not 1 <= n <= total:
        raise ValueError(f"num_inference_steps must lie in [1, {total}], got {n}")
    stride = total // n
    return TimestepGrid(tuple(int(i * stride) for i in reversed(range(n))))


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def add_noise(z0: LatentState, eps: np.ndarray, t: int, sched: NoiseSchedule) -> LatentState:
    _check_shapes(z0.data, eps)
    ab = sched.alpha_bar(t)
    data = math.sqrt(ab) * z0.data + math.sqrt(1.0 - ab) * eps
    return LatentState(data, t, z0.role)


def tweedie_estimate(z_t: LatentState, eps_hat: np.ndarray, sched: NoiseSchedule) -> LatentState:
    _check_shapes(z_t.data, eps_hat)
    ab = sched.alpha_bar(z_t.timestep)
    if ab <= 0.0:
        raise ZeroDivisionError(f"alpha_bar is zero at t={z_t.timestep}")
    data = (z_t.data - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    return LatentState(data, CLEAN, Role.Z0_ESTIMATE)


def step_from_estimate(
    z0_hat: LatentState, eps_hat: np.ndarray, t_target: int, sched: NoiseSchedule, role: Role
) -> LatentState:
    """Re-noise a clean estimate deterministically to ``t_target``."""
    ab = sched.alpha_bar(t_target)
    data = math.sqrt(ab) * z0_hat.data + math.sqrt(1.0 - ab) * eps_hat
    return LatentState(data, t_target, role)


def ddim_step(
    z_t: LatentState, eps_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule
) -> LatentState:
    if t_prev >= t:
        raise ValueError(f"ddim_step needs t > t_prev, got t={t}, t_prev={t_prev}")
    if z_t.timestep != t:
        z_t = LatentState(z_t.data, t, z_t.role)
    z0_hat = tweedie_estimate(z_t, eps_hat, sched)
    return step_from_estimate(z0_hat, eps_hat, t_prev, sched, z_t.role)


def ddim_invert_step(
    z_t: LatentState, eps_hat: np.ndarray, t: int, t_next: int, sched: NoiseSchedule
) -> LatentState:
    if t_next < t:
        raise ValueError(f"ddim_invert_step needs t_next >= t, got t={t}, t_next={t_next}")
    if t_next == t:
        return LatentState(z_t.data, t, z_t.role)
    if z_t.timestep != t:
        z_t = LatentState(z_t.data, t, z_t.role)
    z0_hat = tweedie_estimate(z_t, eps_hat, sched)
    return step_from_estimate(z0_hat, eps_hat, t_next, sched, z_t.role)
