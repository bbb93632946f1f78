"""Momentum-free adaptive first-order optimizer with a fixed step size."""
from __future__ import annotations

from typing import Iterable, Optional

import numpy as np


class AdaptiveSGD:
    """RMS-scaled gradient steps with bias-corrected second moments.

    Only parameters listed in ``trainable`` are touched; all others stay
    bitwise identical. Updates are applied in sorted name order.
    """

    def __init__(self, params: dict, lr: float, trainable: Optional[Iterable[str]] = None,
                 beta: float = 0.99, eps: float = 1e-8, clip_norm: float = 0.0):
        self.params = params
        self.lr, self.beta, self.eps, self.clip_norm = lr, beta, eps, clip_norm
        names = params if trainable is None else trainable
        self.trainable = sorted(names)
        self.sq = {k: np.zeros_like(params[k]) for k in self.trainable}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        scale = 1.0
        if self.clip_norm > 0:
            norm = np.sqrt(sum(float((grads[k].astype(np.float64) ** 2).sum())
                               for k in self.trainable))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        corr = 1.0 - self.beta ** self.t
        for k in self.trainable:
            g = grads[k] * scale
            v = self.sq[k]
            v *= self.beta
            v += (1.0 - self.beta) * g * g
            p = self.params[k]
            p -= (self.lr * g / (np.sqrt(v / corr) + self.eps)).astype(p.dtype)
