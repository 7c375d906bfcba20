from __future__ import annotations

import numpy as np

from .params import ParameterGroup


class Adam:
    """Adaptive-moment optimizer over the trainable subset of a ParameterGroup.

    Parameters outside ``params.trainable`` are never written, so their bytes
    stay identical across steps.
    """

    def __init__(self, params: ParameterGroup, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(self.params.trainable):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32, copy=False)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.params.zero_grad()
