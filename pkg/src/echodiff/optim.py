from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.5, 0.9), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            dt = p.dtype.type
            self.m[i] = dt(b1) * self.m[i] + dt(1 - b1) * g
            self.v[i] = dt(b2) * self.v[i] + dt(1 - b2) * g * g
            update = (self.m[i] / dt(c1)) / (np.sqrt(self.v[i] / dt(c2)) + dt(self.eps))
            p.data = p.data - dt(self.lr) * update

    def state_arrays(self) -> list:
        return self.m + self.v

    def load_state_arrays(self, arrays: Sequence[np.ndarray], step_count: int) -> None:
        n = len(self.params)
        if len(arrays) != 2 * n:
            raise ValueError(f"expected {2 * n} moment arrays, got {len(arrays)}")
        self.m = [np.array(a, dtype=p.dtype) for a, p in zip(arrays[:n], self.params)]
        self.v = [np.array(a, dtype=p.dtype) for a, p in zip(arrays[n:], self.params)]
        self.step_count = step_count
