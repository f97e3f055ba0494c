"""Caption tokenisation and the bidirectional GRU text encoder."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import Module, Rng, Tensor
from .core import ops as T

PAD, UNK = 0, 1
_NON_WORD = re.compile(r"[^\w\s]")


def split_words(caption: str) -> list[str]:
    return _NON_WORD.sub(" ", caption.lower()).split()


class Vocabulary:
    """Token ids in first-seen order; ids 0 and 1 are reserved for pad/unknown."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = ["<pad>", "<unk>"]
        self.stoi: dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, captions: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for c in captions:
            for tok in split_words(c):
                vocab.add(tok)
        return vocab

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[2:]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(caption: str, vocab: Vocabulary, max_len: int) -> list[int]:
    ids = [vocab.id(tok) for tok in split_words(caption)][:max_len]
    return ids + [PAD] * (max_len - len(ids))


@dataclass
class TextEncoding:
    """Batched encoder output.

    words: ``[N, D, T]`` word features, zero in pad columns.
    sentence: ``[N, D]`` global sentence vectors.
    mask: ``[N, T]`` boolean, True for real tokens.
    """

    words: Tensor
    sentence: Tensor
    mask: np.ndarray

    def __len__(self) -> int:
        return self.mask.shape[0]

    def take(self, idx) -> "TextEncoding":
        return TextEncoding(Tensor(self.words.data[idx]), Tensor(self.sentence.data[idx]), self.mask[idx])


class GruCell(Module):
    def __init__(self, n_in: int, hidden: int, rng: Rng):
        super().__init__()
        self.wx = Tensor(rng.normal((3 * hidden, n_in)) / np.sqrt(n_in), requires_grad=True)
        self.wh = Tensor(rng.normal((3 * hidden, hidden)) / np.sqrt(hidden), requires_grad=True)
        self.b = Tensor(np.zeros(3 * hidden), requires_grad=True)

    def step(self, xp: Tensor, h: Tensor) -> Tensor:
        """One update from the pre-projected input ``xp = x @ wx.T + b``."""
        H = h.shape[1]
        hp = T.matmul(h, T.transpose(self.wh))
        z = T.sigmoid(xp[:, :H] + hp[:, :H])
        r = T.sigmoid(xp[:, H:2 * H] + hp[:, H:2 * H])
        n = T.tanh(xp[:, 2 * H:] + r * hp[:, 2 * H:])
        return n + z * (h - n)


class TextEncoder(Module):
    """Embedding lookup followed by a masked bidirectional GRU.

    Each direction has ``dim // 2`` hidden units; per-token states of the two
    directions concatenate into word features and their final states into the
    sentence vector. Pad positions carry the running state through unchanged.
    """

    def __init__(self, vocab_size: int, dim: int, max_len: int, rng: Rng):
        super().__init__()
        if dim % 2:
            raise ValueError("text feature dim must be even")
        self.dim = dim
        self.max_len = max_len
        self.emb = Tensor(rng.normal((vocab_size, dim)) * 0.3, requires_grad=True)
        self.fwd = GruCell(dim, dim // 2, rng)
        self.bwd = GruCell(dim, dim // 2, rng)

    def forward(self, ids) -> TextEncoding:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        N, L = ids.shape
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.max_len}")
        if L < self.max_len:
            ids = np.pad(ids, ((0, 0), (0, self.max_len - L)))
            L = self.max_len
        mask = ids != 0
        m = mask.astype(np.float64)
        x = self.emb[ids]                                                    # [N,L,D]
        hidden = self.dim // 2
        states = {}
        for name, cell, order in (("f", self.fwd, range(L)), ("b", self.bwd, reversed(range(L)))):
            xp = T.matmul(x, T.transpose(cell.wx)) + cell.b                  # [N,L,3H]
            h = Tensor(np.zeros((N, hidden)))
            seq = [None] * L
            for t in order:
                mt = m[:, t:t + 1]
                h_new = cell.step(xp[:, t, :], h)
                h = h + (h_new - h) * mt
                seq[t] = h * mt
            states[name] = (seq, h)
        cols = [T.concat([states["f"][0][t], states["b"][0][t]], axis=1) for t in range(L)]
        words = T.transpose(T.reshape(T.concat(cols, axis=1), (N, L, self.dim)), (0, 2, 1))
        sentence = T.concat([states["f"][1], states["b"][1]], axis=1)
        return TextEncoding(words, sentence, mask)
