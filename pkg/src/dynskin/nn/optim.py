"""Adam and heavy-ball SGD over a module's parameters, updated in place."""

from __future__ import annotations

import numpy as np


def adam_step(p, g, m, v, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; ``p``, ``m``, ``v`` are modified in place."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def sgd_momentum_step(p, g, v, lr: float, momentum: float):
    """v <- momentum * v + g; p <- p - lr * v (in place)."""
    v *= momentum
    v += g
    p -= lr * v
    return p


class Adam:
    def __init__(self, module, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.module, self.lr, self.beta1, self.beta2, self.eps = module, lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p) for k, p, _ in module.named_params()}
        self.v = {k: np.zeros_like(p) for k, p, _ in module.named_params()}

    def step(self) -> None:
        self.t += 1
        for k, p, g in self.module.named_params():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k}")
            adam_step(p, g, self.m[k], self.v[k], self.t, self.lr, self.beta1, self.beta2, self.eps)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {f"adam_m.{k}": a for k, a in self.m.items()}
        arrays.update({f"adam_v.{k}": a for k, a in self.v.items()})
        return {"kind": "adam", "t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps}, arrays

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(meta["t"])
        for k in self.m:
            self.m[k][...] = arrays[f"adam_m.{k}"]
            self.v[k][...] = arrays[f"adam_v.{k}"]


class SGDMomentum:
    def __init__(self, module, lr: float = 1e-4, momentum: float = 0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.module, self.lr, self.momentum = module, lr, momentum
        self.t = 0
        self.vel = {k: np.zeros_like(p) for k, p, _ in module.named_params()}

    def step(self) -> None:
        self.t += 1
        for k, p, g in self.module.named_params():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k}")
            sgd_momentum_step(p, g, self.vel[k], self.lr, self.momentum)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        return ({"kind": "sgd_momentum", "t": self.t, "lr": self.lr, "momentum": self.momentum},
                {f"velocity.{k}": a for k, a in self.vel.items()})

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(meta["t"])
        for k in self.vel:
            self.vel[k][...] = arrays[f"velocity.{k}"]
