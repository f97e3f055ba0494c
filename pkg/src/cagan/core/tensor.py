"""Dense float64 tensors with a tape-based reverse-mode differentiation graph.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and gradient recording is enabled) the result keeps references to
its parents and a closure mapping the output cotangent to input cotangents.
``Tensor.backward`` walks the graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff --------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data ** 2, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data / b.data, (a, b), backward)


def power(x: Tensor, p: float) -> Tensor:
    return Tensor._node(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._node(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._node(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    out = -np.logaddexp(0.0, -x.data)
    return Tensor._node(out, (x,), lambda g: (g * _sigmoid(-x.data),))


def clamp_min(x: Tensor, low: float) -> Tensor:
    keep = x.data > low
    return Tensor._node(np.where(keep, x.data, low), (x,), lambda g: (g * keep,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._node(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._node(x.data * scale, (x,), lambda g: (g * scale,))


# -- reductions ----------------------------------------------------------------


def _expand_like(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return Tensor._node(out, (x,), lambda g: (_expand_like(g, x.shape, axis, keepdims),))


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(out.size, 1)
    return Tensor._node(out, (x,), lambda g: (_expand_like(g / count, x.shape, axis, keepdims),))


def mean_pool_spatial(x: Tensor) -> Tensor:
    """Average each channel of an ``[N, C, H, W]`` map over H and W."""
    if x.ndim != 4:
        raise ValueError(f"expected [N,C,H,W], got shape {x.shape}")
    return mean(x, axis=(2, 3))


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0.

    A slice with no unmasked entries yields all zeros instead of NaN.
    """
    axis = _norm_axis(axis, x.ndim)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s == 0, 1.0, s)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._node(out, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None, keepdims=False) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    weights = e / np.where(s == 0, 1.0, s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return Tensor._node(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    return Tensor._node(
        out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),)
    )


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalise over all axes except axis 1 with batch statistics.

    Returns ``(out, mean, biased_var)``; the statistics are plain arrays.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gamma.data.reshape(shape)
    out = xhat * g_ + beta.data.reshape(shape)
    m = x.data.size / x.shape[1]

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            gx = inv * (gxhat - (gbeta.reshape(shape) * g_ + xhat * (ggamma.reshape(shape) * g_)) / m)
        return gx, ggamma, gbeta

    return Tensor._node(out, (x, gamma, beta), backward), mu.reshape(-1), var.reshape(-1)


# -- shape manipulation ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._node(x.data[idx], (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = _norm_axis(axis, tensors[0].ndim)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    return Tensor._node(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),)
    )


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._node(np.matmul(a.data, b.data), (a, b), backward)


# -- image operations -------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``[N, C, H, W]`` with ``[Cout, C, kh, kw]``.

    Internally channels-last: columns are ordered (kh, kw, C) so both the
    forward gather and the backward scatter touch contiguous channel runs.
    """
    x, w = as_tensor(x), as_tensor(w)
    N, C, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if C != Cw:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernel expects {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernels must have odd spatial size")
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    wmat = w.data.transpose(0, 2, 3, 1).reshape(Cout, -1)
    pointwise = kh == 1 and kw == 1 and s == 1 and p == 0

    xh = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))
    if pointwise:
        cols = xh.reshape(-1, C)
    else:
        xp = np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0))) if p else xh
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * C)
    out = (cols @ wmat.T).reshape(N, Ho, Wo, Cout)
    if b is not None:
        out += b.data
    out = out.transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(Cout, kh, kw, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if pointwise:
                gx = dcols.reshape(N, H, W, C).transpose(0, 3, 1, 2)
            else:
                dcols = dcols.reshape(N, Ho, Wo, kh, kw, C)
                gxp = np.zeros((N, H + 2 * p, W + 2 * p, C))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, :, i, j]
                gx = gxp[:, p:p + H, p:p + W].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._node(out, parents, backward)


# _UP_TAPS[a, l, i] = 1 when kernel row i of output phase a reads low-res row offset l - 1
_UP_TAPS = np.zeros((2, 3, 3))
for _a in range(2):
    for _i in range(3):
        _UP_TAPS[_a, (_a + _i - 1) // 2 + 1, _i] = 1.0


def upsample_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``conv2d(upsample_nearest(x, 2), w, b, padding=1)`` for a 3x3 kernel.

    Each of the four output phases is a 3x3 low-resolution convolution with
    summed kernel taps, so the gather runs at the input resolution.
    """
    x, w = as_tensor(x), as_tensor(w)
    N, C, H, W = x.shape
    Cout, Cw, kh, kw = w.shape
    if (kh, kw) != (3, 3) or C != Cw:
        raise ValueError("upsample_conv2d needs a 3x3 kernel matching the input channels")
    # phase kernels [a, b, Cout, li, lj, C] flattened to [(a,b,o), (li,lj,c)]
    wph = np.einsum("ali,bmj,ocij->abolmc", _UP_TAPS, _UP_TAPS, w.data).reshape(4 * Cout, 9 * C)
    xp = np.pad(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(N * H * W, 9 * C)
    y = (cols @ wph.T).reshape(N, H, W, 2, 2, Cout)
    out = y.transpose(0, 1, 3, 2, 4, 5).reshape(N, 2 * H, 2 * W, Cout)
    if b is not None:
        out += b.data
    out = out.transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = gh.reshape(N, H, 2, W, 2, Cout).transpose(0, 1, 3, 2, 4, 5).reshape(N * H * W, 4 * Cout)
        gw = None
        if w.requires_grad:
            gph = (g2.T @ cols).reshape(2, 2, Cout, 3, 3, C)
            gw = np.einsum("ali,bmj,abolmc->ocij", _UP_TAPS, _UP_TAPS, gph)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wph).reshape(N, H, W, 3, 3, C)
            gxp = np.zeros((N, H + 2, W + 2, C))
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + H, j:j + W] += dcols[:, :, :, i, j]
            gx = gxp[:, 1:-1, 1:-1].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, gh.reshape(-1, Cout).sum(axis=0)

    return Tensor._node(out, parents, backward)


def pad2d(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    """Pad the two trailing axes by ``pad`` on each side ('zeros' or 'edge')."""
    if pad == 0:
        return x
    if mode == "zeros":
        out = np.pad(x.data, ((0, 0),) * (x.ndim - 2) + ((pad, pad), (pad, pad)))

        def backward(g):
            return (g[..., pad:-pad, pad:-pad],)

        return Tensor._node(out, (x,), backward)
    if mode != "edge":
        raise ValueError(f"unknown padding mode {mode!r}")
    H, W = x.shape[-2:]
    rows = np.clip(np.arange(-pad, H + pad), 0, H - 1)
    cols = np.clip(np.arange(-pad, W + pad), 0, W - 1)
    out = x.data[..., rows, :][..., cols]

    def backward(g):
        # fold the replicated border rows, then columns, back onto the edge pixels
        gr = g[..., pad:pad + H, :].copy()
        gr[..., 0, :] += g[..., :pad, :].sum(axis=-2)
        gr[..., -1, :] += g[..., pad + H:, :].sum(axis=-2)
        gx = gr[..., pad:pad + W].copy()
        gx[..., 0] += gr[..., :pad].sum(axis=-1)
        gx[..., -1] += gr[..., pad + W:].sum(axis=-1)
        return (gx,)

    return Tensor._node(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    N, C, H, W = x.shape

    def backward(g):
        return (g.reshape(N, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return Tensor._node(out, (x,), backward)


def avg_pool(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping box-filter downsampling by an integer factor."""
    N, C, H, W = x.shape
    if H % factor or W % factor:
        raise ValueError(f"spatial size {H}x{W} not divisible by {factor}")
    out = x.data.reshape(N, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))

    def backward(g):
        return (g.repeat(factor, axis=-2).repeat(factor, axis=-1) / factor ** 2,)

    return Tensor._node(out, (x,), backward)


def unfold_neighborhood(x: Tensor, k: int) -> Tensor:
    """Gather each pixel's k x k neighbourhood: ``[N,C,H,W] -> [N,C,k*k,H,W]``.

    Out-of-image neighbours read as zero; callers mask them out.
    """
    N, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C, k * k, H, W)

    def backward(g):
        g = g.reshape(N, C, k, k, H, W)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + H, j:j + W] += g[:, :, i, j]
        return (gxp[:, :, p:p + H, p:p + W],)

    return Tensor._node(out, (x,), backward)
