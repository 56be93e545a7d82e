"""Guide loss, binary cross entropy and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import tensor as tn

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    delta: float
    lam: float = 0.5
    epsilon: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.delta <= 0:
            raise ValueError("the guide loss needs delta > 0")


def guide_loss(s, energy, cfg):
    """Mean hinge (s/delta - lambda)+ over empty frames (energy < epsilon).

    A penalty: low scores on empty frames are rewarded. Clips without empty
    frames contribute 0. Batched input (N, T) averages the per-clip losses.
    """
    s = tn.as_tensor(s)
    energy = np.asarray(energy, dtype=np.float64)
    if s.shape != energy.shape:
        raise ValueError(f"score shape {s.shape} != energy shape {energy.shape}")
    empty = (energy < cfg.epsilon).astype(np.float64)
    count = empty.sum(axis=-1, keepdims=True)
    hinge = tn.clamp_min(s * (1.0 / cfg.delta) - cfg.lam, 0.0)
    per_clip = tn.sum_(hinge * (empty / np.maximum(count, 1.0)), axis=-1)
    return tn.mean(per_clip) if per_clip.ndim else per_clip


def bce_loss(yhat, y):
    """-(1/N) sum(y log p + (1 - y) log(1 - p)) with p clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=np.float64)
    p = tn.clamp(yhat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = tn.log(p) * y + tn.log(1.0 - p) * (1.0 - y)
    return -tn.mean(ll)


def total_loss(bce, guide):
    return bce + guide
