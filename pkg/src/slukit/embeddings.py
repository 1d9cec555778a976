"""Per-word input representations.

Covers the trainable word table, the fixed character-CNN, externally
pretrained vectors, and the scalar mixing of contextual and non-contextual
representations used by the contextual transfer modes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import Vocabulary

# channel layout of the character CNN: (filter width, channels)
DEFAULT_CHAR_CNN_SPEC: tuple[tuple[int, int], ...] = (
    (1, 10),
    (2, 20),
    (3, 20),
    (4, 20),
    (5, 20),
    (6, 10),
)

CHAR_PAD = "\x00"  # boundary/padding symbol, index 0
CHAR_UNK = "\x01"


class DimensionError(ValueError):
    pass


MODES = ("NoUT", "Pretrained", "ELMo", "ELMoL")


@dataclass(frozen=True)
class EmbeddingConfig:
    """Input-embedding layout for one transfer condition."""

    mode: str
    word_dim: int
    char_dim: int
    fixed_dim: int = 0  # externally pretrained part (Pretrained mode)
    char_cnn_spec: tuple[tuple[int, int], ...] = DEFAULT_CHAR_CNN_SPEC

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown embedding mode {self.mode!r}")
        expected = {
            # mode: (word_dim, char_dim, fixed_dim, total)
            "NoUT": (400, 0, 0, 400),
            "Pretrained": (100, 0, 300, 400),
            "ELMo": (0, 0, 0, 1024),
            "ELMoL": (100, 100, 0, 200),
        }[self.mode]
        got = (self.word_dim, self.char_dim, self.fixed_dim, self.total_dim)
        if got != expected:
            raise ValueError(
                f"{self.mode} dims must be (word, char, fixed, total)={expected}, got {got}"
            )

    @property
    def total_dim(self) -> int:
        if self.mode == "ELMo":
            return 1024
        return self.word_dim + self.char_dim + self.fixed_dim

    @classmethod
    def for_mode(cls, mode: str) -> "EmbeddingConfig":
        dims = {
            "NoUT": (400, 0, 0),
            "Pretrained": (100, 0, 300),
            "ELMo": (0, 0, 0),
            "ELMoL": (100, 100, 0),
        }[mode]
        return cls(mode, *dims)


# ---------------------------------------------------------------------------
# Character CNN


class CharVocabulary:
    """Character/index map with padding (0) and unknown (1) symbols."""

    def __init__(self, words: Sequence[str]):
        chars = sorted({c for w in words for c in w})
        self.chars = [CHAR_PAD, CHAR_UNK] + chars
        self._index = {c: i for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(self.chars)

    def encode(self, word: str, min_len: int) -> list[int]:
        """Indices padded with the boundary symbol to at least min_len."""
        ids = [self._index.get(c, 1) for c in word]
        if len(ids) < min_len:
            ids = ids + [0] * (min_len - len(ids))
        return ids


class CharCNN(nn.Module):
    """Fixed-output character CNN: embed, convolve per width, max-pool, concat.

    Words are padded with the boundary symbol so the widest filter always has
    at least one valid position; output dimension is the channel total.
    """

    def __init__(
        self,
        char_vocab: CharVocabulary,
        spec: tuple[tuple[int, int], ...] = DEFAULT_CHAR_CNN_SPEC,
        char_emb_dim: int = 16,
    ):
        super().__init__()
        self.char_vocab = char_vocab
        self.spec = tuple(spec)
        self.embedding = nn.Embedding(len(char_vocab), char_emb_dim, padding_idx=0)
        self.convs = nn.ModuleList(
            [nn.Conv1d(char_emb_dim, channels, width) for width, channels in self.spec]
        )
        self.max_width = max(w for w, _ in self.spec)

    @property
    def output_dim(self) -> int:
        return sum(c for _, c in self.spec)

    def forward(self, char_ids: torch.Tensor) -> torch.Tensor:
        """char_ids: (N, L) long, L >= max filter width. Returns (N, output_dim)."""
        x = self.embedding(char_ids).transpose(1, 2)  # (N, emb, L)
        pooled = [torch.relu(conv(x)).max(dim=2).values for conv in self.convs]
        return torch.cat(pooled, dim=1)

    def embed_words(self, words: Sequence[str]) -> torch.Tensor:
        longest = max(self.max_width, max((len(w) for w in words), default=1))
        ids = torch.tensor(
            [self.char_vocab.encode(w, longest) for w in words], dtype=torch.long
        )
        return self.forward(ids)

    def embed_word(self, word: str) -> torch.Tensor:
        if not word:
            raise ValueError("empty word")
        return self.embed_words([word])[0]


def char_cnn_embed(word: str, cnn: CharCNN) -> np.ndarray:
    """Deterministic fixed character vector of one word."""
    with torch.no_grad():
        return cnn.embed_word(word).numpy()


def build_char_table(cnn: CharCNN, vocab: Vocabulary) -> torch.Tensor:
    """Precompute frozen per-word char vectors over a vocabulary: (V, dim)."""
    with torch.no_grad():
        return cnn.embed_words(vocab.words).detach().clone()


# ---------------------------------------------------------------------------
# Mixing of contextual and non-contextual representations


@dataclass
class MixingWeights:
    """Scaling scalar and raw layer weights; softmax-normalized before use."""

    gamma: float
    raw_s: np.ndarray  # length L + 1

    def __post_init__(self):
        self.raw_s = np.asarray(self.raw_s, dtype=np.float64)
        if self.raw_s.ndim != 1 or self.raw_s.size < 1:
            raise ValueError("raw_s must be a non-empty vector")
        # -inf raw weights are allowed (exact zero after softmax); +inf/nan not
        if not np.isfinite(self.gamma) or not np.all(self.raw_s < np.inf):
            raise ValueError("non-finite mixing weights")

    @property
    def normalized(self) -> np.ndarray:
        shifted = self.raw_s - np.max(self.raw_s)
        exp = np.exp(shifted)
        return exp / exp.sum()

    @classmethod
    def from_normalized(cls, gamma: float, s: Sequence[float]) -> "MixingWeights":
        """Build raw weights whose softmax reproduces ``s`` exactly.

        Entries of 0 map to -inf raw scores, so identity cases are exact.
        """
        s = np.asarray(s, dtype=np.float64)
        if np.any(s < 0) or not np.isclose(s.sum(), 1.0):
            raise ValueError("s must be a probability vector")
        with np.errstate(divide="ignore"):
            return cls(gamma, np.log(s))


def elmo_mix(
    x_t: np.ndarray, h_layers: Sequence[np.ndarray], w: MixingWeights
) -> np.ndarray:
    """gamma * (s0 * x_t + sum_i s_i * h_i) with softmax-normalized s."""
    x_t = np.asarray(x_t, dtype=np.float64)
    hs = [np.asarray(h, dtype=np.float64) for h in h_layers]
    if len(hs) != w.raw_s.size - 1:
        raise DimensionError(
            f"{len(hs)} contextual layers but {w.raw_s.size - 1} layer weights"
        )
    for h in hs:
        if h.shape != x_t.shape:
            raise DimensionError(f"layer shape {h.shape} != input shape {x_t.shape}")
    s = w.normalized
    out = s[0] * x_t
    for i, h in enumerate(hs, start=1):
        out = out + s[i] * h
    return w.gamma * out


def elmol_mix(x_t: np.ndarray, h: np.ndarray, w: MixingWeights) -> np.ndarray:
    """Single-layer mixing: gamma * (s0 * x_t + s1 * h)."""
    if w.raw_s.size != 2:
        raise DimensionError("single-layer mixing needs exactly two weights")
    return elmo_mix(x_t, [h], w)


class ScalarMix(nn.Module):
    """Trainable mixing module: gamma plus L+1 softmax-normalized weights.

    Adds exactly L + 2 scalar parameters (3 in the single-layer case).
    """

    def __init__(self, num_layers: int):
        super().__init__()
        if num_layers < 1:
            raise ValueError("need at least one contextual layer")
        self.num_layers = num_layers
        self.gamma = nn.Parameter(torch.tensor(1.0))
        self.raw_s = nn.Parameter(torch.zeros(num_layers + 1))

    def forward(self, x: torch.Tensor, h_layers: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(h_layers) != self.num_layers:
            raise DimensionError(
                f"expected {self.num_layers} contextual layers, got {len(h_layers)}"
            )
        s = torch.softmax(self.raw_s, dim=0)
        out = s[0] * x
        for i, h in enumerate(h_layers, start=1):
            if h.shape != x.shape:
                raise DimensionError(f"layer shape {tuple(h.shape)} != {tuple(x.shape)}")
            out = out + s[i] * h
        return self.gamma * out

    def weights(self) -> MixingWeights:
        return MixingWeights(
            float(self.gamma.detach()), self.raw_s.detach().numpy().copy()
        )


# ---------------------------------------------------------------------------
# Composition and pretrained vectors


def compose_input(word_vec: np.ndarray, char_vec: np.ndarray) -> np.ndarray:
    """Concatenate the trainable word part (first) with the fixed char part."""
    word_vec = np.asarray(word_vec)
    char_vec = np.asarray(char_vec)
    if word_vec.ndim != 1 or char_vec.ndim != 1:
        raise DimensionError("compose_input expects vectors")
    if word_vec.shape[0] != 100 or char_vec.shape[0] != 100:
        raise DimensionError(
            f"expected 100-dim parts, got {word_vec.shape[0]} and {char_vec.shape[0]}"
        )
    return np.concatenate([word_vec, char_vec])


def load_pretrained_vectors(
    path: str | Path, vocab: Vocabulary, dim: int = 300
) -> torch.Tensor:
    """Read a `word v1 .. vN` text file into a (V, dim) fixed table.

    Vocabulary words missing from the file keep a zero fixed part.
    """
    table = torch.zeros(len(vocab), dim)
    found = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values, got {len(values)}"
                )
            if word.lower() in vocab:
                table[vocab.index(word)] = torch.tensor([float(v) for v in values])
                found += 1
    if found == 0:
        raise ValueError(f"no vocabulary word found in {path}")
    return table
