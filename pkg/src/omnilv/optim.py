"""Decoupled-weight-decay Adam with global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by min(1, max_norm / ||g||); returns (clipped, pre-clip norm)."""
    norm = global_norm(grads)
    if not math.isfinite(max_norm) or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
                   lr: float, weight_decay: float = 0.0, grad_clip: float = math.inf,
                   trainable: set[str] | None = None) -> float:
    """In-place update of ``params`` and ``state``; returns the pre-clip gradient norm.

    Names outside ``trainable`` (when given) are left untouched.
    """
    grads, norm = clip_grad_norm(grads, grad_clip)
    state.step += 1
    bc1 = 1.0 - BETA1 ** state.step
    bc2 = 1.0 - BETA2 ** state.step
    for name, g in grads.items():
        if trainable is not None and name not in trainable:
            continue
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * update
    return norm
