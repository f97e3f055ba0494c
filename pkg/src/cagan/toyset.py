"""Synthetic captioned shapes: rendering, captions, oracles and the on-disk dataset."""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from .core import Rng
from .ppm import read_ppm, write_ppm
from .text import Vocabulary, split_words

SHAPES = ("circle", "square", "triangle", "bar")
COLORS = ("red", "green", "blue", "yellow", "white")
SIZES = ("small", "large")
POSITIONS = ("left", "right", "top", "bottom", "center")
BACKGROUNDS = ("dark", "light")

PALETTE = {
    "red": (0.90, 0.15, 0.10),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "white": (0.97, 0.97, 0.97),
}
BACKGROUND_RGB = {"dark": (0.10, 0.10, 0.10), "light": (0.60, 0.60, 0.62)}
RADIUS = {"small": 0.15, "large": 0.28}
CENTERS = {
    "left": (0.30, 0.50),
    "right": (0.70, 0.50),
    "top": (0.50, 0.30),
    "bottom": (0.50, 0.70),
    "center": (0.50, 0.50),
}

TEMPLATES = (
    "a {size} {color} {shape} on the {position} of a {background} background",
    "a {background} background with a {size} {color} {shape} at the {position}",
    "{size} {color} {shape} placed at the {position} over a {background} background",
)

N_CLASSES = len(SHAPES) * len(COLORS)
SUPERSAMPLE = 4


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    size: str
    position: str
    background: str

    def __post_init__(self):
        for value, allowed in zip(astuple(self), (SHAPES, COLORS, SIZES, POSITIONS, BACKGROUNDS)):
            if value not in allowed:
                raise ValueError(f"unknown scene value {value!r}; expected one of {allowed}")

    @property
    def label(self) -> int:
        """Class index of the (shape, color) pair."""
        return SHAPES.index(self.shape) * len(COLORS) + COLORS.index(self.color)


def all_specs() -> list[SceneSpec]:
    return [SceneSpec(*t) for t in itertools.product(SHAPES, COLORS, SIZES, POSITIONS, BACKGROUNDS)]


def class_name(label: int) -> str:
    return f"{COLORS[label % len(COLORS)]} {SHAPES[label // len(COLORS)]}"


# -- rendering --------------------------------------------------------------------------


def _inside(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cx, cy = CENTERS[spec.position]
    r = RADIUS[spec.size]
    dx, dy = x - cx, y - cy
    if spec.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if spec.shape == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if spec.shape == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.35 * r)
    # upward triangle: apex at cy - r, base at cy + 0.7 r, base half-width r
    t = (dy + r) / (1.7 * r)
    return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)


def coverage(spec: SceneSpec, resolution: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape, ``[H, W]``, from 4x4 supersampling."""
    s = SUPERSAMPLE
    fine = (np.arange(resolution * s) + 0.5) / (resolution * s)
    inside = _inside(spec, fine[None, :], fine[:, None]).astype(np.float64)
    return inside.reshape(resolution, s, resolution, s).mean(axis=(1, 3))


def render(spec: SceneSpec, resolution: int) -> np.ndarray:
    """``[3, H, W]`` image in [-1, 1]."""
    if resolution < 4:
        raise ValueError("resolution must be at least 4")
    cov = coverage(spec, resolution)[None]
    fg = np.asarray(PALETTE[spec.color])[:, None, None]
    bg = np.asarray(BACKGROUND_RGB[spec.background])[:, None, None]
    return (bg + (fg - bg) * cov) * 2.0 - 1.0


def downsample(img: np.ndarray, resolution: int) -> np.ndarray:
    """Box-filter ``[..., H, W]`` down to ``resolution`` (H must be a multiple)."""
    H = img.shape[-1]
    f = H // resolution
    if f * resolution != H:
        raise ValueError(f"cannot box-filter {H}px to {resolution}px")
    if f == 1:
        return img
    lead = img.shape[:-2]
    return img.reshape(*lead, resolution, f, resolution, f).mean(axis=(-3, -1))


# -- captions ---------------------------------------------------------------------------


def caption(spec: SceneSpec, template: int = 0) -> str:
    return TEMPLATES[template].format(**spec.__dict__)


def template_for(spec: SceneSpec, index: int) -> int:
    """Paraphrase template chosen by a stable hash of the spec and its dataset index."""
    key = "/".join(astuple(spec)) + f"/{index}"
    return hashlib.sha256(key.encode("utf-8")).digest()[0] % len(TEMPLATES)


def corpus_vocabulary() -> Vocabulary:
    """Vocabulary of every caption any spec/template can produce."""
    return Vocabulary.build(caption(s, t) for t in range(len(TEMPLATES)) for s in all_specs())


def max_caption_tokens() -> int:
    return max(len(split_words(caption(s, t))) for t in range(len(TEMPLATES)) for s in all_specs())


# -- oracles ------------------------------------------------------------------------------


def _unit_rgb(img: np.ndarray) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) * 0.5


def estimate_mask(img: np.ndarray) -> np.ndarray:
    """Foreground mask from the distance to the (border-median) background colour."""
    x = _unit_rgb(img)
    border = np.concatenate([x[:, 0, :], x[:, -1, :], x[:, :, 0], x[:, :, -1]], axis=1)
    bg = np.median(border, axis=1)
    dist = np.sqrt(((x - bg[:, None, None]) ** 2).sum(axis=0))
    peak = dist.max()
    if peak < 1e-6:
        return np.zeros(dist.shape, dtype=bool)
    return dist >= max(0.5 * peak, 0.1)


def dominant_color(img: np.ndarray, mask: np.ndarray | None = None) -> str:
    """Palette colour nearest to the mean foreground colour.

    The mask defaults to :func:`estimate_mask`; with an empty mask the whole
    image is used.
    """
    x = _unit_rgb(img)
    m = estimate_mask(img) if mask is None else np.asarray(mask) > 0.5
    if not m.any():
        m = np.ones(x.shape[1:], dtype=bool)
    mean = x[:, m].mean(axis=1)
    names = list(PALETTE)
    dists = [np.sum((mean - np.asarray(PALETTE[c])) ** 2) for c in names]
    return names[int(np.argmin(dists))]


def dominant_shape(img: np.ndarray, mask: np.ndarray | None = None) -> str:
    """Shape guess from the mask's bounding-box aspect ratio and fill ratio."""
    m = estimate_mask(img) if mask is None else np.asarray(mask) > 0.5
    if not m.any():
        return "circle"
    rows, cols = np.nonzero(m)
    h = rows.max() - rows.min() + 1
    w = cols.max() - cols.min() + 1
    if w >= 2.0 * h:
        return "bar"
    fill = m.sum() / float(h * w)
    if fill > 0.9:
        return "square"
    if fill > 0.65:
        return "circle"
    return "triangle"


# -- on-disk dataset ------------------------------------------------------------------------

_TSV_HEADER = "index\tcaption\tshape\tcolor\tsize\tposition\tbackground"


def sample_specs(n: int, seed: int, split: str) -> list[SceneSpec]:
    specs = all_specs()
    idx = Rng(seed, "toyset", split).integers(len(specs), size=n)
    return [specs[i] for i in idx]


def write_split(root, split: str, specs: list[SceneSpec], resolution: int) -> None:
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    lines = [_TSV_HEADER]
    for i, spec in enumerate(specs):
        write_ppm(d / f"{i:05d}.ppm", render(spec, resolution))
        lines.append("\t".join([str(i), caption(spec, template_for(spec, i)), *astuple(spec)]))
    (d / "captions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_dataset(root, n_train: int, n_test: int, seed: int, resolution: int = 64) -> Path:
    """Write ``train/`` and ``test/`` splits plus ``vocab.txt`` under ``root``."""
    if n_train < 1 or n_test < 1:
        raise ValueError("dataset splits need at least one image each")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_split(root, "train", sample_specs(n_train, seed, "train"), resolution)
    write_split(root, "test", sample_specs(n_test, seed, "test"), resolution)
    corpus_vocabulary().save(root / "vocab.txt")
    return root


@dataclass
class ToySplit:
    images: np.ndarray       # [N, 3, H, W] in [-1, 1]
    captions: list[str]
    specs: list[SceneSpec]

    def __len__(self) -> int:
        return len(self.captions)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.specs], dtype=np.int64)


def load_split(root, split: str) -> ToySplit:
    d = Path(root) / split
    rows = (d / "captions.tsv").read_text(encoding="utf-8").splitlines()
    if not rows or rows[0] != _TSV_HEADER:
        raise ValueError(f"{d / 'captions.tsv'}: unexpected header")
    captions, specs, images = [], [], []
    for row in rows[1:]:
        index, cap, *fields = row.split("\t")
        captions.append(cap)
        specs.append(SceneSpec(*fields))
        images.append(read_ppm(d / f"{int(index):05d}.ppm"))
    return ToySplit(np.stack(images), captions, specs)


def load_vocabulary(root) -> Vocabulary:
    return Vocabulary.load(Path(root) / "vocab.txt")
