"""Channel, local spatial and word attention blocks."""

from __future__ import annotations

import numpy as np

from .core import Module, Rng, Tensor
from .core import ops as T


class SeBlock(Module):
    """Squeeze-and-excitation: per-channel gates from the spatially pooled map.

    ``gate = sigmoid(w2 @ relu(w1 @ mean_hw(U)))`` and the output is ``gate * U``.
    """

    def __init__(self, channels: int, r: int, rng: Rng):
        super().__init__()
        if r < 1 or channels % r:
            raise ValueError(f"reduction ratio {r} must divide channel count {channels}")
        hidden = channels // r
        self.r = r
        self.w1 = Tensor(rng.normal((hidden, channels)) / np.sqrt(channels), requires_grad=True)
        self.w2 = Tensor(rng.normal((channels, hidden)) / np.sqrt(hidden), requires_grad=True)

    def gate(self, U: Tensor) -> Tensor:
        z = T.mean_pool_spatial(U)
        hidden = T.relu(T.matmul(z, T.transpose(self.w1)))
        return T.sigmoid(T.matmul(hidden, T.transpose(self.w2)))

    def forward(self, U: Tensor) -> Tensor:
        if U.shape[1] != self.w1.shape[1]:
            raise ValueError(f"SE block expects {self.w1.shape[1]} channels, got {U.shape[1]}")
        g = self.gate(U)
        return U * T.reshape(g, g.shape + (1, 1))


def neighborhood_mask(k: int, H: int, W: int) -> np.ndarray:
    """``[k*k, H, W]`` flags: True where offset (a, b) of pixel (i, j) is inside the image."""
    p = k // 2
    off = np.arange(k) - p
    rows = np.arange(H)[None, :] + off[:, None]  # [k, H]
    cols = np.arange(W)[None, :] + off[:, None]
    ok_r = (rows >= 0) & (rows < H)
    ok_c = (cols >= 0) & (cols < W)
    return (ok_r[:, None, :, None] & ok_c[None, :, None, :]).reshape(k * k, H, W)


class LocalSelfAttention(Module):
    """Each pixel attends over its k x k neighbourhood.

    Neighbourhoods are truncated at the border: out-of-image positions are
    excluded from the softmax rather than read as zero padding. Logits are
    scaled by ``1/sqrt(C')``.
    """

    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng):
        super().__init__()
        if k < 1 or k % 2 == 0:
            raise ValueError(f"spatial extent k must be odd and positive, got {k}")
        self.k = k
        scale = 1.0 / np.sqrt(c_in)
        self.wq = Tensor(rng.normal((c_out, c_in)) * scale, requires_grad=True)
        self.wk = Tensor(rng.normal((c_out, c_in)) * scale, requires_grad=True)
        self.wv = Tensor(rng.normal((c_out, c_in)) * scale, requires_grad=True)

    def _project(self, w: Tensor, x: Tensor) -> Tensor:
        return T.conv2d(x, T.reshape(w, w.shape + (1, 1)))

    def forward(self, x: Tensor, return_weights: bool = False):
        N, C, H, W = x.shape
        k = self.k
        if k > 2 * min(H, W) - 1:
            raise ValueError(f"spatial extent {k} too large for a {H}x{W} map")
        c_out = self.wq.shape[0]
        q = self._project(self.wq, x)
        keys = T.unfold_neighborhood(self._project(self.wk, x), k)      # [N,C',k2,H,W]
        values = T.unfold_neighborhood(self._project(self.wv, x), k)
        logits = T.tsum(T.reshape(q, (N, c_out, 1, H, W)) * keys, axis=1) * (1.0 / np.sqrt(c_out))
        weights = T.softmax(logits, axis=1, mask=neighborhood_mask(k, H, W)[None])
        out = T.tsum(T.reshape(weights, (N, 1, k * k, H, W)) * values, axis=2)
        return (out, weights) if return_weights else out


class WordAttention(Module):
    """Word-context features for every image subregion.

    Words are projected into the image feature space by ``uproj``; each
    subregion takes a softmax over (unmasked) words of its dot products with
    the projected words and mixes them into a context vector.
    """

    def __init__(self, img_channels: int, word_dim: int, rng: Rng):
        super().__init__()
        self.uproj = Tensor(rng.normal((img_channels, word_dim)) / np.sqrt(word_dim), requires_grad=True)

    def forward(self, h: Tensor, words: Tensor, mask: np.ndarray, return_weights: bool = False):
        N, C, H, W = h.shape
        if words.shape[1] != self.uproj.shape[1]:
            raise ValueError(f"word dim {words.shape[1]} does not match projection {self.uproj.shape}")
        if C != self.uproj.shape[0]:
            raise ValueError(f"image features have {C} channels, projection gives {self.uproj.shape[0]}")
        proj = T.matmul(self.uproj, words)                                # [N,C,T]
        regions = T.reshape(h, (N, C, H * W))
        scores = T.matmul(T.transpose(regions, (0, 2, 1)), proj)           # [N,HW,T]
        weights = T.softmax(scores, axis=-1, mask=np.asarray(mask, bool)[:, None, :])
        ctx = T.matmul(proj, T.transpose(weights, (0, 2, 1)))              # [N,C,HW]
        ctx = T.reshape(ctx, (N, C, H, W))
        return (ctx, weights) if return_weights else ctx
