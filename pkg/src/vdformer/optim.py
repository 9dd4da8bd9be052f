"""Optimizers over a ParameterStore: decoupled-weight-decay Adam and SGD with
momentum. Updates iterate parameters in registration order and state arrays
round-trip through checkpoints, so interrupted and uninterrupted runs agree
bit-for-bit."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .params import ParameterStore

__all__ = ["AdamW", "SgdMomentum", "build_optimizer"]


class AdamW:
    def __init__(self, store: ParameterStore, lr: float = 1e-4,
                 weight_decay: float = 0.05, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in store}
        self.v = {p.name: np.zeros_like(p.data) for p in store}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for p in self.store:
            g = p.grad
            if g is None:
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.array(arrays[f"optim.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"optim.v.{name}"], dtype=np.float64)
        self.step_count = step_count


class SgdMomentum:
    def __init__(self, store: ParameterStore, lr: float = 1e-2,
                 weight_decay: float = 0.0, momentum: float = 0.9):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.step_count = 0
        self.velocity = {p.name: np.zeros_like(p.data) for p in store}

    def step(self) -> None:
        self.step_count += 1
        for p in self.store:
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            vel = self.velocity[p.name]
            vel *= self.momentum
            vel += g
            p.data = p.data - self.lr * vel

    def state_arrays(self) -> dict:
        return {f"optim.vel.{name}": arr for name, arr in self.velocity.items()}

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for name in self.velocity:
            self.velocity[name] = np.array(arrays[f"optim.vel.{name}"],
                                           dtype=np.float64)
        self.step_count = step_count


def build_optimizer(name: str, store: ParameterStore, lr: float,
                    weight_decay: float, momentum: float = 0.9):
    if name == "adamw":
        return AdamW(store, lr=lr, weight_decay=weight_decay)
    if name == "sgd":
        return SgdMomentum(store, lr=lr, weight_decay=weight_decay,
                           momentum=momentum)
    raise ConfigError(f"unknown optimizer {name!r} (expected adamw or sgd)")
