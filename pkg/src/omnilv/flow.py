"""Straight-line conditional flow matching: noise at t=0, data at t=1."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, TensorError, no_grad

Velocity = Callable[[np.ndarray, np.ndarray], Tensor]


class SamplerDivergenceError(ArithmeticError):
    def __init__(self, step: int):
        super().__init__(f"sampler produced non-finite values at step {step}")
        self.step = step


@dataclass
class LossRecord:
    step: int
    loss: float
    task_id: str
    t: float


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Per-sample generator so batched and one-at-a-time draws agree."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def draw_noise_and_time(seed: int, step: int, index: int, shape) -> tuple[np.ndarray, float]:
    rng = sample_rng(seed, step, index, 0xF10)
    return rng.standard_normal(shape), float(rng.uniform(0.0, 1.0))


def sample_path(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """x_t = (1 - t) x0 + t x1 with t scalar or per-sample [B]."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"path endpoints differ in shape: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    return x1 - x0


def cfm_loss(velocity: Velocity, x1: np.ndarray, x0: np.ndarray, t: np.ndarray, per_sample: bool = False):
    """Mean over all elements of (u(t, x_t) - (x1 - x0))**2.

    With ``per_sample`` also returns the detached per-sample means.
    """
    xt = sample_path(x0, x1, t)
    diff = velocity(xt, t) - target_velocity(x0, x1)
    sq = diff * diff
    loss = sq.mean()
    if per_sample:
        return loss, sq.data.reshape(sq.shape[0], -1).mean(axis=1)
    return loss


def initial_noise(seed: int, batch: int, shape) -> np.ndarray:
    return np.stack([sample_rng(seed, i, 0x5A3).standard_normal(shape) for i in range(batch)])


def euler_sample(velocity: Velocity, batch: int, shape, steps: int = 20, seed: int = 0,
                 x0: np.ndarray | None = None) -> np.ndarray:
    """Integrate dx/dt = u(t, x) from noise with uniform Euler steps; clamp only at the end."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = initial_noise(seed, batch, shape) if x0 is None else np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    with no_grad():
        for k in range(steps):
            t = np.full(batch, k * dt)
            try:
                u = velocity(x, t).data
            except TensorError as exc:
                raise SamplerDivergenceError(k) from exc
            x = x + dt * u
            if not np.isfinite(x).all():
                raise SamplerDivergenceError(k)
    return np.clip(x, -1.0, 1.0)
