"""Adam optimizer for model training loops.

This is the standard bias-corrected Adam used to fit the encoder, the
denoiser and the detector. The perturbation attack has its own moment
update (no bias correction) inside the attacks module.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros(p.shape) for k, p in params.items()}
        self._v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grad_scale: float = 1.0, lr: float | None = None) -> None:
        """Apply one update from the accumulated `.grad` slots.

        grad_scale rescales the accumulated gradients (1/batch for
        mini-batch means). Parameters without a gradient are skipped.
        """
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * grad_scale
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
