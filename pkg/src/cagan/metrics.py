"""Inception Score and Frechet distance with a toy-trained stand-in classifier.

One network (:class:`EvalNet`) supplies both the class posteriors for IS and
the penultimate features for FID. Every image goes through
:func:`preprocess` first, so scores are only comparable between reports that
name the same EvalNet checkpoint hash.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import Conv2d, Linear, Module, Rng, Tensor, no_grad
from .core import ops as T

EVAL_SIZE = 32


# -- pre-processing ---------------------------------------------------------------------


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` linear-interpolation weights, half-pixel centres (align_corners=False).

    Output pixel i samples source coordinate ``(i + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]``, and blends its two neighbours linearly.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def preprocess(img: np.ndarray, size: int = EVAL_SIZE) -> np.ndarray:
    """Bilinear resize ``[..., H, W]`` images in [-1, 1] to ``size`` and map to [0, 1]."""
    x = np.asarray(img, dtype=np.float64)
    H, W = x.shape[-2:]
    if (H, W) != (size, size):
        x = resize_matrix(H, size) @ x @ resize_matrix(W, size).T
    return (x + 1.0) * 0.5


# -- the stand-in network ---------------------------------------------------------------------


class EvalNet(Module):
    """Three-conv classifier over the 20 (shape, colour) classes; features are the pooled last conv."""

    def __init__(self, n_classes: int, rng: Rng, width: int = 16):
        super().__init__()
        g = np.sqrt(2.0)
        self.c1 = Conv2d(3, width, 3, rng, gain=g)
        self.c2 = Conv2d(width, 2 * width, 3, rng, stride=2, gain=g)
        self.c3 = Conv2d(2 * width, 4 * width, 3, rng, stride=2, gain=g)
        self.head = Linear(4 * width, n_classes, rng)

    @property
    def feature_dim(self) -> int:
        return self.head.w.shape[1]

    def features(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for conv in (self.c1, self.c2, self.c3):
            h = T.leaky_relu(conv(h))
        return T.mean_pool_spatial(h)

    def forward(self, x) -> Tensor:
        """Class logits for pre-processed images."""
        return self.head(self.features(x))

    def embed(self, images: np.ndarray, batch: int = 100) -> tuple[np.ndarray, np.ndarray]:
        """(probabilities ``[M, C]``, features ``[M, F]``) for raw [-1, 1] images."""
        probs, feats = [], []
        with no_grad():
            for i in range(0, len(images), batch):
                f = self.features(preprocess(images[i:i + batch]))
                logits = self.head(f).data
                z = np.exp(logits - logits.max(axis=1, keepdims=True))
                probs.append(z / z.sum(axis=1, keepdims=True))
                feats.append(f.data)
        return np.concatenate(probs), np.concatenate(feats)


# -- scores -------------------------------------------------------------------------------------


def inception_score(probs: np.ndarray, n_splits: int = 10) -> tuple[float, float]:
    """``exp(mean_x KL(p(y|x) || p(y)))`` per split; returns (mean, population std)."""
    p = np.asarray(probs, dtype=np.float64)
    M = p.shape[0]
    if n_splits < 1 or M % n_splits:
        raise ValueError(f"{M} samples do not divide into {n_splits} splits")
    p = np.maximum(p, 1e-12)
    scores = []
    for part in np.split(p, n_splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = np.sum(part * (np.log(part) - np.log(marginal)), axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased (M - 1) covariance."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_gaussian needs at least two feature rows")
    mu = x.mean(axis=0)
    d = x - mu
    sigma = d.T @ d / (x.shape[0] - 1)
    return GaussianStats(mu, (sigma + sigma.T) * 0.5)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) * 0.5)
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term is the sum of square roots of the eigenvalues
    of ``S_a^(1/2) S_b S_a^(1/2)`` (negative ones clamped to zero).
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError("Gaussian statistics have different feature dimensions")
    for arr in (a.mu, b.mu, a.sigma, b.sigma):
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite Gaussian statistics")
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) * 0.5)
    cross = np.sum(np.sqrt(np.maximum(eig, 0.0)))
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)
    return max(value, 0.0)


# -- reports --------------------------------------------------------------------------------------


@dataclass
class MetricRow:
    epoch: int
    is_mean: float
    is_std: float
    fid: float

    def csv(self) -> str:
        return f"{self.epoch},{self.is_mean:.6f},{self.is_std:.6f},{self.fid:.6f}"


@dataclass
class MetricReport:
    """Provenance header (``# key: value`` lines) plus CSV rows ``epoch,is_mean,is_std,fid``."""

    header: dict[str, str] = field(default_factory=dict)
    rows: list[MetricRow] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"# {k}: {v}" for k, v in self.header.items()]
        lines.append("epoch,is_mean,is_std,fid")
        lines.extend(r.csv() for r in self.rows)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricReport":
        report = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                report.header[key] = value
            elif line and not line.startswith("epoch"):
                e, m, s, f = line.split(",")
                report.rows.append(MetricRow(int(e), float(m), float(s), float(f)))
        return report

    @staticmethod
    def table_row(row: MetricRow, name: str = "model") -> str:
        return f"{name}: IS {row.is_mean:.2f} ± {row.is_std:.2f}, FID {row.fid:.2f}"


def evaluate_model(sample_images: Callable[[np.ndarray], np.ndarray], real_images: np.ndarray,
                   evalnet: EvalNet, n_samples: int, n_splits: int = 10, seed: int = 0,
                   epoch: int = 0, batch: int = 50, real_stats: GaussianStats | None = None) -> MetricRow:
    """Score ``n_samples`` generated images against the real set.

    ``sample_images(indices)`` returns images for the given caption indices of
    the real set. Indices are a seeded permutation (drawn with replacement only
    when ``n_samples`` exceeds the set size), so an identity generator scores
    FID ~ 0.
    """
    if n_samples < 2 * n_splits:
        raise ValueError(f"need at least {2 * n_splits} samples for {n_splits} splits")
    n_real = len(real_images)
    rng = Rng(seed, "evaluate")
    if n_samples <= n_real:
        idx = rng.permutation(n_real)[:n_samples]
    else:
        idx = rng.integers(n_real, size=n_samples)
    probs, feats = [], []
    for i in range(0, n_samples, batch):
        p, f = evalnet.embed(sample_images(idx[i:i + batch]), batch)
        probs.append(p)
        feats.append(f)
    probs, feats = np.concatenate(probs), np.concatenate(feats)
    if real_stats is None:
        real_stats = fit_gaussian(evalnet.embed(real_images, batch)[1])
    is_mean, is_std = inception_score(probs, n_splits)
    fid = frechet_distance(fit_gaussian(feats), real_stats)
    return MetricRow(epoch, is_mean, is_std, fid)
