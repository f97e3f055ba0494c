"""Word-level image-text matching (DAMSM) and its training loss.

The image side is a small strided conv trunk whose last feature grid gives
one feature vector per subregion; a pooled linear head gives the global
vector. Both live in the same space as the text encoder's features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Conv2d, Linear, Module, Rng, Tensor
from .core import ops as T
from .text import TextEncoder, TextEncoding


@dataclass(frozen=True)
class DamsmTemperatures:
    gamma1: float = 4.0
    gamma2: float = 5.0
    gamma3: float = 10.0

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ValueError("DAMSM temperatures must be positive")


@dataclass
class ImageRegionFeatures:
    regions: Tensor     # [N, D, R]
    global_vec: Tensor  # [N, D]


class ImageEncoder(Module):
    """conv s1 -> conv s2 -> conv s1 -> conv s2, edge padded, then 1x1 to D."""

    def __init__(self, dim: int, resolution: int, rng: Rng, width: int = 16):
        super().__init__()
        if resolution % 4:
            raise ValueError("encoder resolution must be a multiple of 4")
        self.resolution = resolution
        self.c1 = Conv2d(3, width, 3, rng, stride=1, padding=0, gain=np.sqrt(2))
        self.c2 = Conv2d(width, 2 * width, 3, rng, stride=2, padding=0, gain=np.sqrt(2))
        self.c3 = Conv2d(2 * width, 2 * width, 3, rng, stride=1, padding=0, gain=np.sqrt(2))
        self.c4 = Conv2d(2 * width, 4 * width, 3, rng, stride=2, padding=0, gain=np.sqrt(2))
        self.region = Conv2d(4 * width, dim, 1, rng)
        self.glob = Linear(4 * width, dim, rng)

    def forward(self, img: Tensor) -> ImageRegionFeatures:
        img = img if isinstance(img, Tensor) else Tensor(img)
        if img.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(f"image encoder expects {self.resolution}x{self.resolution}, got {img.shape[-2:]}")
        h = img
        for conv in (self.c1, self.c2, self.c3, self.c4):
            h = T.leaky_relu(conv(T.pad2d(h, 1, "edge")))
        regions = self.region(h)
        N, D = regions.shape[:2]
        return ImageRegionFeatures(
            T.reshape(regions, (N, D, -1)),
            self.glob(T.mean_pool_spatial(h)),
        )


def _unit(x: Tensor, axis: int) -> Tensor:
    # clamping the squared norm keeps zero vectors (pad words) out of sqrt's singularity
    norm = T.sqrt(T.clamp_min(T.tsum(x * x, axis=axis, keepdims=True), 1e-16))
    return x / norm


def word_region_scores(regions: Tensor, words: Tensor, mask: np.ndarray, temps: DamsmTemperatures) -> Tensor:
    """Matching score for every (image i, caption j) pair -> ``[Ni, Nc]``.

    Per word: softmax over regions of gamma1 * cosine(word, region) gives a
    region-context vector; its cosine with the word is the word's relevance.
    Relevances are pooled by ``log(sum exp(gamma2 * rel)) / gamma2`` over the
    caption's real words.
    """
    Ni, D, R = regions.shape
    Nc, _, L = words.shape
    v = _unit(regions, axis=1)                                   # [Ni,D,R]
    e = T.transpose(_unit(words, axis=1), (0, 2, 1))             # [Nc,L,D]
    sim = T.matmul(T.reshape(e, (1, Nc, L, D)), T.reshape(v, (Ni, 1, D, R)))  # [Ni,Nc,L,R]
    attn = T.softmax(sim * temps.gamma1, axis=-1)
    ctx = T.matmul(attn, T.reshape(T.transpose(v, (0, 2, 1)), (Ni, 1, R, D)))  # [Ni,Nc,L,D]
    rel = T.tsum(_unit(ctx, axis=-1) * T.reshape(e, (1, Nc, L, D)), axis=-1)   # [Ni,Nc,L]
    pooled = T.logsumexp(rel * temps.gamma2, axis=-1, mask=np.asarray(mask, bool)[None])
    return pooled * (1.0 / temps.gamma2)


def matching_score(feats: ImageRegionFeatures, enc: TextEncoding, temps: DamsmTemperatures) -> Tensor:
    """Scalar score of one image against one caption."""
    if feats.regions.shape[0] != 1 or len(enc) != 1:
        raise ValueError("matching_score takes a single image and a single caption")
    if feats.regions.shape[1] != enc.words.shape[1]:
        raise ValueError("image and word features live in different dimensions")
    return T.reshape(word_region_scores(feats.regions, enc.words, enc.mask, temps), ())


def _symmetric_nll(logits: Tensor) -> Tensor:
    """Cross-entropy of the diagonal pairing, image->text plus text->image."""
    n = logits.shape[0]
    diag = (np.arange(n), np.arange(n))
    rows = T.log_softmax(logits, axis=1)[diag]
    cols = T.log_softmax(logits, axis=0)[diag]
    return -(T.mean(rows) + T.mean(cols))


def damsm_loss(feats: ImageRegionFeatures, enc: TextEncoding, temps: DamsmTemperatures) -> Tensor:
    """Sum of word-level and sentence-level matching NLLs in both directions."""
    n = feats.regions.shape[0]
    if n < 2:
        raise ValueError("DAMSM loss needs a batch of at least 2 pairs")
    if len(enc) != n:
        raise ValueError("image and caption batches differ in size")
    word = word_region_scores(feats.regions, enc.words, enc.mask, temps)
    g = _unit(feats.global_vec, axis=1)
    s = _unit(enc.sentence, axis=1)
    sent = T.matmul(g, T.transpose(s))
    return _symmetric_nll(word * temps.gamma3) + _symmetric_nll(sent * temps.gamma3)


class Damsm(Module):
    """Text encoder plus image encoder; checkpoint names ``damsm.txt.*``/``damsm.img.*``."""

    def __init__(self, vocab_size: int, dim: int, max_len: int, resolution: int, rng: Rng):
        super().__init__()
        self.txt = TextEncoder(vocab_size, dim, max_len, rng.child("txt"))
        self.img = ImageEncoder(dim, resolution, rng.child("img"))

    def loss(self, images, ids, temps: DamsmTemperatures) -> Tensor:
        return damsm_loss(self.img(images), self.txt(ids), temps)
