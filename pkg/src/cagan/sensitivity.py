"""Caption-edit sensitivity: does swapping one word change what gets drawn?"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Rng, Tensor
from .gan import Generator
from .pipeline import encode_captions, sample_stages, token_ids
from .text import TextEncoder, TextEncoding, Vocabulary, split_words
from .toyset import dominant_color, dominant_shape


@dataclass
class EditResult:
    draw: int
    old: str
    new: str
    color_before: str
    color_after: str
    shape_before: str
    shape_after: str

    @property
    def flipped(self) -> bool:
        return self.color_before != self.color_after


@dataclass
class SensitivityReport:
    caption: str
    results: list[EditResult] = field(default_factory=list)

    def flip_rate(self, old: str | None = None, new: str | None = None) -> float:
        rows = [r for r in self.results if (old is None or r.old == old) and (new is None or r.new == new)]
        return float(np.mean([r.flipped for r in rows])) if rows else 0.0

    def hit_rate(self) -> float:
        """Fraction of edits whose new image shows exactly the substituted colour."""
        rows = [r for r in self.results if r.old != r.new]
        return float(np.mean([r.color_after == r.new for r in rows])) if rows else 0.0

    def to_text(self) -> str:
        lines = [f"# caption: {self.caption}", "draw,old,new,color_before,color_after,shape_before,shape_after,flip"]
        for r in self.results:
            lines.append(f"{r.draw},{r.old},{r.new},{r.color_before},{r.color_after},"
                         f"{r.shape_before},{r.shape_after},{int(r.flipped)}")
        pairs = sorted({(r.old, r.new) for r in self.results})
        for old, new in pairs:
            lines.append(f"# {old}->{new}: flip rate {self.flip_rate(old, new):.3f}")
        lines.append(f"# overall flip rate: {self.flip_rate():.3f}")
        lines.append(f"# targeted hit rate: {self.hit_rate():.3f}")
        return "\n".join(lines) + "\n"


def substitute(caption: str, old: str, new: str, vocab: Vocabulary) -> str:
    """Replace the single occurrence of token ``old`` with ``new``."""
    tokens = split_words(caption)
    if new not in vocab:
        raise ValueError(f"substitution token {new!r} is not in the vocabulary")
    if tokens.count(old) != 1:
        raise ValueError(f"token {old!r} must occur exactly once in {caption!r}")
    return " ".join(new if t == old else t for t in tokens)


def caption_sensitivity(G: Generator, encoder: TextEncoder, vocab: Vocabulary, caption: str,
                        substitutions: list[tuple[str, str]], max_len: int, draws: int = 50,
                        seed: int = 0) -> SensitivityReport:
    """Generate base and edited captions under shared noise and compare predicted colours."""
    edited = [substitute(caption, old, new, vocab) for old, new in substitutions]
    captions = [caption] + edited
    rng = Rng(seed, "sensitivity")
    noise = rng.child("z").normal((draws, G.nz))
    eps = rng.child("eps").normal((draws, G.cond_dim))
    enc = encode_captions(encoder, token_ids(captions, vocab, max_len))
    # every caption meets every draw: caption-major blocks of `draws` rows
    rep = np.repeat(np.arange(len(captions)), draws)
    tiled = TextEncoding(Tensor(enc.words.data[rep]), Tensor(enc.sentence.data[rep]), enc.mask[rep])
    images = sample_stages(G, tiled, np.tile(noise, (len(captions), 1)), np.tile(eps, (len(captions), 1)))[-1]
    images = images.reshape(len(captions), draws, *images.shape[1:])
    report = SensitivityReport(caption)
    base_colors = [dominant_color(img) for img in images[0]]
    base_shapes = [dominant_shape(img) for img in images[0]]
    for k, (old, new) in enumerate(substitutions):
        for d in range(draws):
            img = images[k + 1, d]
            report.results.append(EditResult(d, old, new, base_colors[d], dominant_color(img),
                                             base_shapes[d], dominant_shape(img)))
    return report
