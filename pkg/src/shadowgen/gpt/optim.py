"""AdamW with decoupled weight decay and the cosine warm-restart schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import decayed


def cosine_warm_restarts(step: int, steps_per_epoch: int, t0_epochs: float, t_mult: int,
                         eta_min: float, eta_max: float) -> float:
    """Learning rate at optimizer step ``step`` (0-based).

    Cycle i lasts ``t0_epochs * t_mult**i`` epochs; inside a cycle
    ``eta = eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / T_i)) / 2``
    with ``t_cur`` measured in fractional epochs.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    period = t0_epochs * steps_per_epoch
    start = 0
    while step >= start + period:
        start += period
        period *= t_mult
    t_cur = (step - start) / period
    return eta_min + (eta_max - eta_min) * (1.0 + math.cos(math.pi * t_cur)) / 2.0


@dataclass
class AdamW:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0

    def __post_init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        """In-place update of ``params``."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and decayed(name):
                p *= 1.0 - lr * self.weight_decay
            p -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out["m." + name] = self.m[name]
            out["v." + name] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = int(step_count)
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v.")}
