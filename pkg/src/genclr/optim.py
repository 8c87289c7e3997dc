"""SGD (with momentum) and Adam, with checkpoint-serializable state."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Optimizer:
    def __init__(self, params: list[Tensor], lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def gradients(self) -> list[np.ndarray]:
        return [p.grad_array() for p in self.params]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        pass


class SGD(Optimizer):
    def __init__(self, params, lr, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocity):
            g = p.grad_array()
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= (lr * g).astype(p.dtype)

    def state_arrays(self):
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}

    def load_state_arrays(self, state):
        for i, v in enumerate(self.velocity):
            v[...] = state[f"velocity.{i}"]


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad_array()
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= step.astype(p.dtype)

    def state_arrays(self):
        out = {"t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, state):
        self.t = int(state["t"][0])
        for i in range(len(self.m)):
            self.m[i][...] = state[f"m.{i}"]
            self.v[i][...] = state[f"v.{i}"]


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
