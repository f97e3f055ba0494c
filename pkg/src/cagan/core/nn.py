"""Parameter containers and the handful of layers the networks are built from."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class Module:
    """Holds parameters (``Tensor`` attributes), buffers and child modules.

    Parameter names are dotted attribute paths, e.g. ``"f1.res0.conv1.w"``.
    """

    def __init__(self):
        object.__setattr__(self, "_buffers", [])
        object.__setattr__(self, "training", True)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers.append(name)
        setattr(self, name, np.asarray(value, dtype=np.float64))

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters(prefix)}
        out.update(dict(self.named_buffers(prefix)))
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in tensors:
                raise KeyError(f"checkpoint has no tensor {name!r}")
            if tensors[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {tensors[name].shape} != {p.shape}")
            p.data = np.array(tensors[name], dtype=np.float64)
        for name, _ in list(self.named_buffers(prefix)):
            if name not in tensors:
                raise KeyError(f"checkpoint has no tensor {name!r}")
            owner, attr = self._resolve(name[len(prefix):])
            setattr(owner, attr, np.array(tensors[name], dtype=np.float64))

    def _resolve(self, path: str):
        *heads, attr = path.split(".")
        owner = self
        for h in heads:
            owner = getattr(owner, h)
        return owner, attr

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleDict(Module):
    """String-keyed container; keys become path components."""

    def __init__(self, items=None):
        super().__init__()
        for k, v in (items or {}).items():
            self[k] = v

    def __setitem__(self, key: str, module: Module) -> None:
        setattr(self, key, module)

    def __getitem__(self, key: str) -> Module:
        return getattr(self, key)

    def __contains__(self, key: str) -> bool:
        return isinstance(vars(self).get(key), Module)

    def keys(self):
        return [k for k, _ in self._children()]


def _init(rng: Rng, shape, fan_in: int, gain: float) -> Tensor:
    return Tensor(rng.normal(shape) * gain / np.sqrt(fan_in), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.w = _init(rng, (n_out, n_in), n_in, gain)
        if bias:
            self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.w))
        b = getattr(self, "b", None)
        return y + b if b is not None else y


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng: Rng, stride=1, padding=None, bias=True, gain=1.0):
        super().__init__()
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.w = _init(rng, (c_out, c_in, k, k), c_in * k * k, gain)
        if bias:
            self.b = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, getattr(self, "b", None), self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalisation over every axis but the channel axis (axis 1)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        shape = (1, -1) + (1,) * (x.ndim - 2)
        if self.training:
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps)
            n = x.size / x.shape[1]
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var * n / max(n - 1, 1)
            return out
        mu = self.running_mean.reshape(shape)
        xhat = (x - mu) / np.sqrt(self.running_var.reshape(shape) + self.eps)
        return xhat * T.reshape(self.gamma, shape) + T.reshape(self.beta, shape)
