"""Forward/backward language model pretraining on unlabeled text.

Two configurations matter in practice: the single-layer model whose
recurrent weights are re-used as the SLU shared layer, and a two-layer
model providing frozen contextual embeddings. Both share a trainable
character CNN and word table on the input side and one output projection
over the word vocabulary; the two directional cross-entropies are averaged.

Sentence boundaries: begin/end symbols are added per sentence during
training and perplexity scoring; no state is carried across sentences.
Contextual-state extraction runs over exactly the given tokens.
"""

from __future__ import annotations

import copy
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (
    arrays_to_state_dict,
    load_container,
    save_container,
    state_dict_to_arrays,
)
from .corpus import UnlabeledCorpus, Vocabulary
from .embeddings import DEFAULT_CHAR_CNN_SPEC, CharCNN, CharVocabulary, build_char_table

GRAD_CLIP_NORM = 5.0


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; carries epoch/step diagnostics."""


@dataclass
class LMConfig:
    vocab: Vocabulary
    layers: int = 1
    hidden_size: int = 100  # per direction
    word_dim: int = 100
    char_dim: int = 100
    char_cnn_spec: tuple[tuple[int, int], ...] = DEFAULT_CHAR_CNN_SPEC
    batch_size: int = 32
    epochs: int = 50
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one recurrent layer")
        if self.char_dim and self.char_dim != sum(c for _, c in self.char_cnn_spec):
            raise ValueError("char_dim must equal the CNN channel total")

    @property
    def input_dim(self) -> int:
        return self.word_dim + self.char_dim

    @property
    def output_dim(self) -> int:
        """Concatenated bidirectional state size."""
        return 2 * self.hidden_size

    @classmethod
    def single_layer(cls, vocab: Vocabulary, **kw) -> "LMConfig":
        """The light configuration: one bi-layer, 200-dim concatenated output."""
        return cls(vocab=vocab, layers=1, hidden_size=100, word_dim=100, char_dim=100, **kw)

    @classmethod
    def two_layer(cls, vocab: Vocabulary, **kw) -> "LMConfig":
        """Desk-scale contextual-embedding LM: 2 layers, 1024-dim states."""
        kw.setdefault("epochs", 25)
        return cls(vocab=vocab, layers=2, hidden_size=512, word_dim=412, char_dim=100, **kw)

    def to_meta(self) -> dict:
        return {
            "layers": self.layers,
            "hidden_size": self.hidden_size,
            "word_dim": self.word_dim,
            "char_dim": self.char_dim,
            "char_cnn_spec": [list(p) for p in self.char_cnn_spec],
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "vocab_words": list(self.vocab.words),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "LMConfig":
        return cls(
            vocab=Vocabulary(list(meta["vocab_words"])),
            layers=meta["layers"],
            hidden_size=meta["hidden_size"],
            word_dim=meta["word_dim"],
            char_dim=meta["char_dim"],
            char_cnn_spec=tuple(tuple(p) for p in meta["char_cnn_spec"]),
            batch_size=meta["batch_size"],
            epochs=meta["epochs"],
            learning_rate=meta["learning_rate"],
        )


class BiLM(nn.Module):
    """Stacked forward and backward word-level LSTMs over char+word inputs."""

    def __init__(self, config: LMConfig):
        super().__init__()
        self.config = config
        vocab = config.vocab
        self.word_emb = nn.Embedding(len(vocab), config.word_dim, padding_idx=vocab.pad_index)
        self.char_cnn = CharCNN(CharVocabulary(vocab.words), config.char_cnn_spec)
        # per-word character ids, padded to one fixed width for the whole vocab
        width = max(self.char_cnn.max_width, max(len(w) for w in vocab.words))
        char_ids = torch.tensor(
            [self.char_cnn.char_vocab.encode(w, width) for w in vocab.words],
            dtype=torch.long,
        )
        self.register_buffer("char_ids", char_ids)

        def stack() -> nn.ModuleList:
            layers = []
            for i in range(config.layers):
                in_dim = config.input_dim if i == 0 else config.hidden_size
                layers.append(nn.LSTM(in_dim, config.hidden_size, batch_first=True))
            return nn.ModuleList(layers)

        self.fwd_layers = stack()
        self.bwd_layers = stack()
        # shared across directions; zero init keeps the untrained model uniform
        self.proj = nn.Linear(config.hidden_size, len(vocab))
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab

    def embed_ids(self, word_ids: torch.Tensor) -> torch.Tensor:
        """(B, S) word indices -> (B, S, input_dim) char+word representations."""
        B, S = word_ids.shape
        word_part = self.word_emb(word_ids)
        char_part = self.char_cnn(self.char_ids[word_ids.reshape(-1)]).reshape(B, S, -1)
        return torch.cat([word_part, char_part], dim=2)

    def _run_stack(self, layers: nn.ModuleList, emb: torch.Tensor) -> list[torch.Tensor]:
        states = []
        x = emb
        for lstm in layers:
            x, _ = lstm(x)
            states.append(x)
        return states

    def _boundary_batch(
        self, sentences: Sequence[Sequence[str]]
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Pad sentences wrapped in <s>..</s>; also return the reversed batch.

        Returns (ids, rev_ids, lengths) where lengths include both boundary
        symbols and reversal happens within each true length.
        """
        vocab = self.vocab
        rows = [
            [vocab.bos_index] + vocab.encode(s) + [vocab.eos_index] for s in sentences
        ]
        lengths = torch.tensor([len(r) for r in rows], dtype=torch.long)
        S = int(lengths.max())
        ids = torch.full((len(rows), S), vocab.pad_index, dtype=torch.long)
        rev = torch.full_like(ids, vocab.pad_index)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
            rev[i, : len(r)] = torch.tensor(r[::-1])
        return ids, rev, lengths

    def batch_cross_entropies(
        self, sentences: Sequence[Sequence[str]]
    ) -> tuple[torch.Tensor, torch.Tensor, int]:
        """Summed forward and backward next-token cross-entropy over a batch.

        Each direction predicts length-1 targets per wrapped sentence; the
        token total is identical for the two directions.
        """
        ids, rev, lengths = self._boundary_batch(sentences)
        mask = (
            torch.arange(ids.shape[1] - 1).unsqueeze(0) < (lengths - 1).unsqueeze(1)
        )  # (B, S-1) valid prediction positions

        def direction_ce(stream: torch.Tensor, layers: nn.ModuleList) -> torch.Tensor:
            inputs, targets = stream[:, :-1], stream[:, 1:]
            top = self._run_stack(layers, self.embed_ids(inputs))[-1]
            logits = self.proj(top)
            ce = F.cross_entropy(
                logits.reshape(-1, logits.shape[-1]),
                targets.reshape(-1),
                reduction="none",
            ).reshape(targets.shape)
            return (ce * mask).sum()

        n_tokens = int(mask.sum())
        return direction_ce(ids, self.fwd_layers), direction_ce(rev, self.bwd_layers), n_tokens

    @torch.no_grad()
    def token_states(self, tokens: Sequence[str]) -> list[torch.Tensor]:
        """Per-layer contextual states over exactly ``tokens``: L x (T, 2H).

        Each layer concatenates the forward-direction state (conditions only
        on tokens up to t) with the backward-direction state (only on tokens
        from t on); parameters are left untouched.
        """
        if not tokens:
            raise ValueError("empty token sequence")
        ids = torch.tensor([self.vocab.encode(tokens)], dtype=torch.long)
        emb_f = self.embed_ids(ids)
        emb_b = self.embed_ids(ids.flip(dims=[1]))
        fwd = self._run_stack(self.fwd_layers, emb_f)
        bwd = [h.flip(dims=[1]) for h in self._run_stack(self.bwd_layers, emb_b)]
        return [torch.cat([f[0], b[0]], dim=1) for f, b in zip(fwd, bwd)]

    @torch.no_grad()
    def noncontextual_inputs(self, tokens: Sequence[str]) -> torch.Tensor:
        """Token-layer representation x_t, shaped to match the state dim.

        When the input embedding already equals 2H it is used as is; when it
        equals H it is duplicated, the usual token-layer convention.
        """
        ids = torch.tensor([self.vocab.encode(tokens)], dtype=torch.long)
        emb = self.embed_ids(ids)[0]
        if emb.shape[1] == self.config.output_dim:
            return emb
        if emb.shape[1] * 2 == self.config.output_dim:
            return torch.cat([emb, emb], dim=1)
        raise ValueError(
            f"input dim {emb.shape[1]} incompatible with state dim {self.config.output_dim}"
        )


@dataclass
class PerplexityReport:
    dataset: str
    token_count: int
    perplexity: float

    def __post_init__(self):
        if self.perplexity < 1.0 - 1e-9:
            raise ValueError("perplexity below 1")


@dataclass
class LMCheckpoint:
    """Trained LM parameters plus vocabulary and training metadata."""

    config: LMConfig
    state: dict[str, torch.Tensor]
    metadata: dict = field(default_factory=dict)

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab

    @property
    def layers(self) -> int:
        return self.config.layers

    def build_model(self) -> BiLM:
        model = BiLM(self.config)
        model.load_state_dict({k: v.clone() for k, v in self.state.items()})
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        save_container(
            path,
            state_dict_to_arrays(self.state),
            {"kind": "lm", "config": self.config.to_meta(), "metadata": self.metadata},
        )

    @classmethod
    def load(cls, path: str | Path) -> "LMCheckpoint":
        tensors, meta = load_container(path)
        if meta.get("kind") != "lm":
            raise ValueError(f"{path} is not an LM checkpoint")
        return cls(
            config=LMConfig.from_meta(meta["config"]),
            state=arrays_to_state_dict(tensors),
            metadata=meta.get("metadata", {}),
        )


def _batches(
    sentences: Sequence[Sequence[str]], batch_size: int, rng: random.Random | None
) -> list[list[Sequence[str]]]:
    order = list(range(len(sentences)))
    if rng is not None:
        rng.shuffle(order)
    return [
        [sentences[i] for i in order[k : k + batch_size]]
        for k in range(0, len(order), batch_size)
    ]


def _corpus_perplexity(model: BiLM, corpus: UnlabeledCorpus, batch_size: int = 64) -> float:
    total_f = total_b = 0.0
    total_tokens = 0
    with torch.no_grad():
        for batch in _batches(corpus.sentences, batch_size, rng=None):
            ce_f, ce_b, n = model.batch_cross_entropies(batch)
            total_f += float(ce_f)
            total_b += float(ce_b)
            total_tokens += n
    mean_ce = 0.5 * (total_f + total_b) / total_tokens
    return math.exp(mean_ce)


def perplexity(ckpt: LMCheckpoint, text: UnlabeledCorpus, name: str = "") -> PerplexityReport:
    """exp of the mean per-token cross-entropy, directions averaged."""
    if not text.sentences:
        raise ValueError("empty corpus")
    model = ckpt.build_model()
    return PerplexityReport(
        dataset=name or "corpus",
        token_count=text.token_count,
        perplexity=_corpus_perplexity(model, text),
    )


def train_bilm(
    corpus: UnlabeledCorpus,
    config: LMConfig,
    heldout: UnlabeledCorpus,
    seed: int = 0,
    resume_from: LMCheckpoint | None = None,
    log=None,
) -> LMCheckpoint:
    """Minimize averaged bidirectional cross-entropy; keep the best-held-out epoch.

    Deterministic under a fixed seed; epoch numbering continues across
    ``resume_from``. Non-finite losses abort with diagnostics.
    """
    if not corpus.sentences:
        raise ValueError("empty training corpus")
    if not heldout.sentences:
        raise ValueError("empty held-out corpus")
    overlap = set(corpus.sentences) & set(heldout.sentences)
    if overlap:
        raise ValueError(f"held-out overlaps training corpus ({len(overlap)} sentences)")

    torch.manual_seed(seed)
    model = BiLM(config)
    start_epoch = 0
    history: list[dict] = []
    if resume_from is not None:
        model.load_state_dict({k: v.clone() for k, v in resume_from.state.items()})
        start_epoch = resume_from.metadata.get("epochs_trained", 0)
        history = list(resume_from.metadata.get("history", []))

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    best_state = copy.deepcopy(model.state_dict())
    model.eval()
    best_ppl = _corpus_perplexity(model, heldout)
    best_epoch = start_epoch - 1  # untrained / resumed baseline
    t0 = time.time()

    for epoch in range(start_epoch, start_epoch + config.epochs):
        model.train()
        rng = random.Random(seed * 100003 + epoch)
        for step, batch in enumerate(_batches(corpus.sentences, config.batch_size, rng)):
            optimizer.zero_grad()
            ce_f, ce_b, n = model.batch_cross_entropies(batch)
            loss = 0.5 * (ce_f + ce_b) / n
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite LM loss at epoch {epoch} step {step} "
                    f"(ce_f={float(ce_f):g}, ce_b={float(ce_b):g}, tokens={n})"
                )
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
            optimizer.step()
        model.eval()
        ppl = _corpus_perplexity(model, heldout)
        history.append({"epoch": epoch, "heldout_perplexity": ppl})
        if log:
            log(f"epoch {epoch}: held-out perplexity {ppl:.3f}")
        if ppl < best_ppl:
            best_ppl = ppl
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    return LMCheckpoint(
        config=config,
        state=best_state,
        metadata={
            "epochs_trained": start_epoch + config.epochs,
            "best_epoch": best_epoch,
            "best_heldout_perplexity": best_ppl,
            "history": history,
            "train_tokens": corpus.token_count,
            "seed": seed,
            "wall_clock_sec": time.time() - t0,
        },
    )


def contextual_states(ckpt: LMCheckpoint, tokens: Sequence[str]) -> list[np.ndarray]:
    """Frozen per-layer, per-token states h_{t,i}: L arrays of shape (T, 2H)."""
    model = ckpt.build_model()
    return [h.numpy() for h in model.token_states(tokens)]


@dataclass
class SharedLayerBundle:
    """Single-layer LM parameters shaped for the SLU lower layer.

    ``lstm_state`` maps bidirectional-LSTM parameter names (forward and
    ``_reverse``) to tensors; ``char_table`` is the frozen per-word char-CNN
    lookup over the vocabulary; ``word_embedding`` seeds the trainable table.
    """

    lstm_state: dict[str, torch.Tensor]
    char_table: torch.Tensor  # (V, char_dim)
    word_embedding: torch.Tensor  # (V, word_dim)
    vocab: Vocabulary
    hidden_size: int

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_size


def export_shared_layer(ckpt: LMCheckpoint) -> SharedLayerBundle:
    """Re-shape a single-layer checkpoint for use as the SLU shared layer."""
    if ckpt.layers != 1:
        raise ValueError(f"shared-layer export needs a 1-layer LM, got {ckpt.layers}")
    model = ckpt.build_model()
    fwd = model.fwd_layers[0].state_dict()
    bwd = model.bwd_layers[0].state_dict()
    lstm_state = {}
    for name, tensor in fwd.items():
        lstm_state[name] = tensor.clone()
    for name, tensor in bwd.items():
        lstm_state[f"{name}_reverse"] = tensor.clone()
    return SharedLayerBundle(
        lstm_state=lstm_state,
        char_table=build_char_table(model.char_cnn, ckpt.vocab),
        word_embedding=model.word_emb.weight.detach().clone(),
        vocab=ckpt.vocab,
        hidden_size=ckpt.config.hidden_size,
    )
