"""Optimizers. Adam drives normal training; the meta path uses plain GD."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Sgd:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, lr: float):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        self.lr = lr

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            p.data -= self.lr * grads[name]


class Adam:
    """Adam with bias correction (decay rates 0.9 / 0.999, eps 1e-8)."""

    def __init__(self, lr: float, decay_m: float = 0.9, decay_v: float = 0.999,
                 eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        self.lr = lr
        self.decay_m = decay_m
        self.decay_v = decay_v
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bm, bv = self.decay_m, self.decay_v
        for name, p in params.items():
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = bm * m + (1.0 - bm) * g
            v = bv * v + (1.0 - bv) * (g * g)
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1.0 - bm ** self.t)
            v_hat = v / (1.0 - bv ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"adam.t": np.array([float(self.t)])}
        for n, m in self._m.items():
            out[f"adam.m.{n}"] = m
        for n, v in self._v.items():
            out[f"adam.v.{n}"] = v
        return out
