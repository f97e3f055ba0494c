from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: dict,
    lr: float = 2e-4,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction.

    ``state`` holds ``"t"`` and per-parameter lists ``"m"``/``"v"``; they are
    created on first use.
    """
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise ValueError(f"parameter shape {p.shape} does not match gradient {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Adam over a named parameter set; missing grads count as zero."""

    def __init__(self, params: dict[str, Tensor], lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        values = [p.data for p in self.params.values()]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params.values()]
        adam_step(values, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        if "m" not in self.state:
            return {}
        out = {f"{prefix}.t": np.array([float(self.state["t"])])}
        for name, m, v in zip(self.params, self.state["m"], self.state["v"]):
            out[f"{prefix}.m.{name}"] = m
            out[f"{prefix}.v.{name}"] = v
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], prefix: str) -> None:
        key = f"{prefix}.t"
        if key not in tensors:
            return
        self.state = {
            "t": int(tensors[key][0]),
            "m": [tensors[f"{prefix}.m.{n}"].copy() for n in self.params],
            "v": [tensors[f"{prefix}.v.{n}"].copy() for n in self.params],
        }
