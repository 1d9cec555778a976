"""Multi-task SLU network: shared bi-LSTM feeding an entity-tagging
bi-LSTM+CRF head and an intent bi-LSTM+softmax head.

Every trainable parameter belongs to exactly one named group so that
fine-tuning schedules can freeze or rescale layers individually:
embedding, mixing, shared_birnn, et_birnn, et_projection, crf, ic_birnn,
intent_softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .checkpoint import (
    arrays_to_state_dict,
    load_container,
    save_container,
    state_dict_to_arrays,
)
from .corpus import Dataset, LabelSpace, Utterance, Vocabulary, repair_bio
from .crf import LinearChainCRF, viterbi
from .embeddings import EmbeddingConfig, ScalarMix
from .lm import BiLM, LMCheckpoint, SharedLayerBundle

PARAM_GROUPS = (
    "embedding",
    "mixing",
    "shared_birnn",
    "et_birnn",
    "et_projection",
    "crf",
    "ic_birnn",
    "intent_softmax",
)
HEAD_GROUPS = frozenset({"et_projection", "crf", "intent_softmax"})


@dataclass(frozen=True)
class ModelConfig:
    mode: str  # NoUT | Pretrained | ELMo | ELMoL
    label_space: LabelSpace
    vocab: Vocabulary | None = None  # unused in ELMo mode
    hidden_size: int = 100  # per direction; all three layers emit 200-dim output
    dropout: float = 0.5
    contextual_layers: int = 2  # layer count of the frozen LM (ELMo mode)
    elmo_dim: int = 1024  # frozen-LM state size; 1024 at the standard scale
    l2_lambda: float = 1e-4

    def __post_init__(self):
        EmbeddingConfig.for_mode(self.mode)  # validates the mode
        if self.mode != "ELMo" and self.vocab is None:
            raise ValueError(f"{self.mode} mode requires a vocabulary")

    @property
    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig.for_mode(self.mode)

    def to_meta(self) -> dict:
        return {
            "mode": self.mode,
            "intents": list(self.label_space.intents),
            "entity_types": list(self.label_space.entity_types),
            "vocab_words": list(self.vocab.words) if self.vocab else None,
            "hidden_size": self.hidden_size,
            "dropout": self.dropout,
            "contextual_layers": self.contextual_layers,
            "elmo_dim": self.elmo_dim,
            "l2_lambda": self.l2_lambda,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        return cls(
            mode=meta["mode"],
            label_space=LabelSpace(tuple(meta["intents"]), tuple(meta["entity_types"])),
            vocab=Vocabulary(list(meta["vocab_words"])) if meta["vocab_words"] else None,
            hidden_size=meta["hidden_size"],
            dropout=meta["dropout"],
            contextual_layers=meta["contextual_layers"],
            elmo_dim=meta["elmo_dim"],
            l2_lambda=meta["l2_lambda"],
        )


@dataclass
class Batch:
    """Padded model inputs for a list of utterances."""

    lengths: torch.Tensor  # (B,)
    token_ids: torch.Tensor | None = None  # (B, T) for embedding-table modes
    elmo_x: torch.Tensor | None = None  # (B, T, 2H_lm) frozen token layer
    elmo_h: list[torch.Tensor] | None = None  # per LM layer, (B, T, 2H_lm)
    intent_ids: torch.Tensor | None = None  # (B,)
    tag_ids: torch.Tensor | None = None  # (B, T)

    @property
    def size(self) -> int:
        return int(self.lengths.shape[0])


@dataclass
class BatchTrace:
    """Forward activations for a batch; padded positions are undefined."""

    shared: torch.Tensor  # r^c_t, (B, T, 2H)
    et_states: torch.Tensor  # r^entity_t = fwd (+) bwd, (B, T, 2H)
    ic_states: torch.Tensor  # (B, T, 2H)
    r_intent: torch.Tensor  # r^IC,f_T (+) r^IC,b_1, (B, 2H)
    emissions: torch.Tensor  # (B, T, K)
    intent_logits: torch.Tensor  # (B, n_intents)
    lengths: torch.Tensor


@dataclass
class ForwardTrace:
    """Single-utterance activations as numpy arrays."""

    shared: np.ndarray  # (T, 2H)
    et_states: np.ndarray  # (T, 2H)
    ic_states: np.ndarray  # (T, 2H)
    r_intent: np.ndarray  # (2H,)
    emissions: np.ndarray  # (T, K)
    intent_logits: np.ndarray  # (n_intents,)


@dataclass(frozen=True)
class Prediction:
    intent: str
    tags: tuple[str, ...]
    intent_posterior: np.ndarray


class Featurizer:
    """Turns utterances into padded Batch tensors for one embedding mode.

    In ELMo mode the frozen LM's states are computed here (and memoized per
    token sequence, which is sound because the LM never changes).
    """

    def __init__(
        self,
        mode: str,
        label_space: LabelSpace,
        vocab: Vocabulary | None = None,
        elmo_lm: BiLM | None = None,
    ):
        self.mode = mode
        self.label_space = label_space
        self.tag_index = label_space.tag_index()
        self.intent_index = label_space.intent_index()
        if mode == "ELMo":
            if elmo_lm is None:
                raise ValueError("ELMo mode requires a frozen language model")
            self.vocab = elmo_lm.vocab
        else:
            if vocab is None:
                raise ValueError(f"{mode} mode requires a vocabulary")
            self.vocab = vocab
        self.elmo_lm = elmo_lm
        self._elmo_cache: dict[tuple[str, ...], tuple[torch.Tensor, list[torch.Tensor]]] = {}

    def _elmo_states(self, tokens: tuple[str, ...]):
        hit = self._elmo_cache.get(tokens)
        if hit is None:
            x = self.elmo_lm.noncontextual_inputs(tokens)
            hs = self.elmo_lm.token_states(tokens)
            hit = (x, hs)
            self._elmo_cache[tokens] = hit
        return hit

    def encode(
        self, utterances: Sequence[Utterance] | Sequence[Sequence[str]], labeled: bool = True
    ) -> Batch:
        if not utterances:
            raise ValueError("empty batch")
        tokens = [
            tuple(u.tokens) if isinstance(u, Utterance) else tuple(u) for u in utterances
        ]
        if any(len(t) == 0 for t in tokens):
            raise ValueError("empty utterance")
        lengths = torch.tensor([len(t) for t in tokens], dtype=torch.long)
        T = int(lengths.max())
        batch = Batch(lengths=lengths)

        if self.mode == "ELMo":
            dim = 2 * self.elmo_lm.config.hidden_size
            L = self.elmo_lm.config.layers
            x = torch.zeros(len(tokens), T, dim)
            hs = [torch.zeros(len(tokens), T, dim) for _ in range(L)]
            for i, toks in enumerate(tokens):
                xi, his = self._elmo_states(toks)
                x[i, : len(toks)] = xi
                for l in range(L):
                    hs[l][i, : len(toks)] = his[l]
            batch.elmo_x = x
            batch.elmo_h = hs
        else:
            ids = torch.full((len(tokens), T), self.vocab.pad_index, dtype=torch.long)
            for i, toks in enumerate(tokens):
                ids[i, : len(toks)] = torch.tensor(self.vocab.encode(toks))
            batch.token_ids = ids

        if labeled and utterances and isinstance(utterances[0], Utterance):
            batch.intent_ids = torch.tensor(
                [self._intent_id(u.intent) for u in utterances], dtype=torch.long
            )
            tag_ids = torch.zeros(len(tokens), T, dtype=torch.long)
            for i, u in enumerate(utterances):
                tag_ids[i, : len(u.tokens)] = torch.tensor(
                    [self._tag_id(t) for t in u.bio_tags]
                )
            batch.tag_ids = tag_ids
        return batch

    def _intent_id(self, intent: str) -> int:
        try:
            return self.intent_index[intent]
        except KeyError:
            raise ValueError(f"intent {intent!r} outside the label space") from None

    def _tag_id(self, tag: str) -> int:
        try:
            return self.tag_index[tag]
        except KeyError:
            raise ValueError(f"tag {tag!r} outside the label space") from None


def _run_bilstm(lstm: nn.LSTM, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    packed = pack_padded_sequence(
        x, lengths.cpu(), batch_first=True, enforce_sorted=False
    )
    out, _ = lstm(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
    return out


class SLUModel(nn.Module):
    def __init__(self, config: ModelConfig, featurizer: Featurizer | None = None):
        super().__init__()
        self.config = config
        space = config.label_space
        self.num_tags = len(space.bio_tags)
        self.num_intents = len(space.intents)
        emb = config.embedding
        H = config.hidden_size

        if config.mode in ("NoUT", "Pretrained", "ELMoL"):
            V = len(config.vocab)
            self.word_emb = nn.Embedding(V, emb.word_dim, padding_idx=config.vocab.pad_index)
        else:
            self.word_emb = None
        if config.mode == "Pretrained":
            self.register_buffer("fixed_table", torch.zeros(len(config.vocab), emb.fixed_dim))
        if config.mode == "ELMoL":
            self.register_buffer("char_table", torch.zeros(len(config.vocab), emb.char_dim))
        if config.mode == "ELMo":
            self.mixing = ScalarMix(config.contextual_layers)
        elif config.mode == "ELMoL":
            self.mixing = ScalarMix(1)
        else:
            self.mixing = None

        input_dim = config.elmo_dim if config.mode == "ELMo" else emb.total_dim
        self.shared_birnn = nn.LSTM(input_dim, H, batch_first=True, bidirectional=True)
        self.et_birnn = nn.LSTM(2 * H, H, batch_first=True, bidirectional=True)
        self.ic_birnn = nn.LSTM(2 * H, H, batch_first=True, bidirectional=True)
        self.et_projection = nn.Linear(2 * H, self.num_tags)
        self.crf = LinearChainCRF(self.num_tags)
        self.intent_softmax = nn.Linear(2 * H, self.num_intents)
        self.dropout = nn.Dropout(config.dropout)
        self._init_params()

        # not an nn.Module: a featurizer's frozen LM must stay out of this
        # module's parameter tree
        self.featurizer = featurizer

    # -- initialization ----------------------------------------------------

    def _init_params(self):
        for lstm in (self.shared_birnn, self.et_birnn, self.ic_birnn):
            for name, p in lstm.named_parameters():
                if name.startswith("weight"):
                    nn.init.xavier_uniform_(p)
                else:
                    nn.init.zeros_(p)
        for linear in (self.et_projection, self.intent_softmax):
            nn.init.xavier_uniform_(linear.weight)
            nn.init.zeros_(linear.bias)
        if self.word_emb is not None:
            nn.init.uniform_(self.word_emb.weight, -0.1, 0.1)
        # CRF scores start at zero (uniform over paths) via LinearChainCRF

    # -- parameter bookkeeping ----------------------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Exhaustive, disjoint partition of all trainable parameters."""
        groups: dict[str, list[nn.Parameter]] = {
            "embedding": list(self.word_emb.parameters()) if self.word_emb else [],
            "mixing": list(self.mixing.parameters()) if self.mixing else [],
            "shared_birnn": list(self.shared_birnn.parameters()),
            "et_birnn": list(self.et_birnn.parameters()),
            "et_projection": list(self.et_projection.parameters()),
            "crf": list(self.crf.parameters()),
            "ic_birnn": list(self.ic_birnn.parameters()),
            "intent_softmax": list(self.intent_softmax.parameters()),
        }
        return groups

    def group_snapshot(self, names: Sequence[str] | None = None) -> dict[str, list[torch.Tensor]]:
        groups = self.parameter_groups()
        names = list(names) if names is not None else list(groups)
        return {g: [p.detach().clone() for p in groups[g]] for g in names}

    def l2_penalty(self) -> torch.Tensor:
        """lambda * sum of squared weight-matrix entries (biases and the
        mixing scalars excluded)."""
        total = torch.zeros(())
        for p in self.parameters():
            if p.requires_grad and p.ndim >= 2:
                total = total + p.pow(2).sum()
        return self.config.l2_lambda * total

    # -- forward -------------------------------------------------------------

    def _input_embedding(self, batch: Batch) -> torch.Tensor:
        mode = self.config.mode
        if mode == "ELMo":
            return self.mixing(batch.elmo_x, batch.elmo_h)
        parts = [self.word_emb(batch.token_ids)]
        if mode == "Pretrained":
            parts.append(self.fixed_table[batch.token_ids])
        elif mode == "ELMoL":
            parts.append(self.char_table[batch.token_ids])
        return torch.cat(parts, dim=2) if len(parts) > 1 else parts[0]

    def forward_batch(self, batch: Batch) -> BatchTrace:
        lengths = batch.lengths
        x = self.dropout(self._input_embedding(batch))
        shared = self.dropout(_run_bilstm(self.shared_birnn, x, lengths))
        if self.config.mode == "ELMoL":
            head_in = self.mixing(x, [shared])
        else:
            head_in = shared
        et_states = self.dropout(_run_bilstm(self.et_birnn, head_in, lengths))
        emissions = self.et_projection(et_states)
        ic_states = self.dropout(_run_bilstm(self.ic_birnn, head_in, lengths))
        H = self.config.hidden_size
        rows = torch.arange(batch.size)
        r_intent = torch.cat(
            [ic_states[rows, lengths - 1, :H], ic_states[:, 0, H:]], dim=1
        )
        intent_logits = self.intent_softmax(r_intent)
        return BatchTrace(
            shared=shared,
            et_states=et_states,
            ic_states=ic_states,
            r_intent=r_intent,
            emissions=emissions,
            intent_logits=intent_logits,
            lengths=lengths,
        )

    def trace(self, tokens: Sequence[str]) -> ForwardTrace:
        """Evaluation-mode activations for one utterance."""
        if not tokens:
            raise ValueError("empty utterance")
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                batch = self.featurizer.encode([tuple(tokens)], labeled=False)
                bt = self.forward_batch(batch)
        finally:
            self.train(was_training)
        T = len(tokens)
        return ForwardTrace(
            shared=bt.shared[0, :T].numpy(),
            et_states=bt.et_states[0, :T].numpy(),
            ic_states=bt.ic_states[0, :T].numpy(),
            r_intent=bt.r_intent[0].numpy(),
            emissions=bt.emissions[0, :T].numpy(),
            intent_logits=bt.intent_logits[0].numpy(),
        )

    # -- losses ----------------------------------------------------------------

    def joint_loss_batch(self, trace: BatchTrace, batch: Batch) -> torch.Tensor:
        """Per-utterance IC cross-entropy + ET CRF NLL, equally weighted: (B,)."""
        if batch.intent_ids is None or batch.tag_ids is None:
            raise ValueError("batch is unlabeled")
        ic = F.cross_entropy(trace.intent_logits, batch.intent_ids, reduction="none")
        et = self.crf.nll(trace.emissions, batch.tag_ids, batch.lengths)
        return ic + et

    def joint_loss(self, utterance: Utterance) -> torch.Tensor:
        """Spec-level loss of a single labeled utterance (training mode off)."""
        batch = self.featurizer.encode([utterance])
        trace = self.forward_batch(batch)
        return self.joint_loss_batch(trace, batch)[0]

    # -- prediction ---------------------------------------------------------------

    def predict(self, tokens: Sequence[str]) -> Prediction:
        space = self.config.label_space
        ft = self.trace(tokens)
        emissions = torch.from_numpy(ft.emissions)
        path = viterbi(emissions, self.crf.matrix())
        tags = [space.bio_tags[i] for i in path.tags]
        tags, _ = repair_bio(tags)
        logits = ft.intent_logits
        posterior = np.exp(logits - logits.max())
        posterior /= posterior.sum()
        return Prediction(
            intent=space.intents[int(np.argmax(logits))],
            tags=tuple(tags),
            intent_posterior=posterior,
        )

    def predict_dataset(self, utterances: Sequence[Utterance], batch_size: int = 64):
        """Batched prediction; yields (utterance, Prediction) pairs."""
        was_training = self.training
        self.eval()
        space = self.config.label_space
        try:
            with torch.no_grad():
                for k in range(0, len(utterances), batch_size):
                    chunk = utterances[k : k + batch_size]
                    batch = self.featurizer.encode(chunk, labeled=False)
                    bt = self.forward_batch(batch)
                    paths = self.crf.decode(bt.emissions, batch.lengths)
                    intents = bt.intent_logits.argmax(dim=1)
                    for i, utt in enumerate(chunk):
                        tags = [space.bio_tags[j] for j in paths[i].tags]
                        tags, _ = repair_bio(tags)
                        logits = bt.intent_logits[i].numpy()
                        post = np.exp(logits - logits.max())
                        post /= post.sum()
                        yield utt, Prediction(
                            intent=space.intents[int(intents[i])],
                            tags=tuple(tags),
                            intent_posterior=post,
                        )
        finally:
            self.train(was_training)

    # -- transfer plumbing -----------------------------------------------------

    def load_shared_layer(self, bundle: SharedLayerBundle) -> None:
        """Initialize embedding + shared bi-LSTM from a pretrained LM bundle."""
        if self.config.mode != "ELMoL":
            raise ValueError("shared-layer initialization applies to ELMoL mode")
        if bundle.output_dim != 2 * self.config.hidden_size:
            raise ValueError(
                f"bundle output dim {bundle.output_dim} != shared layer "
                f"{2 * self.config.hidden_size}"
            )
        if bundle.vocab.words != self.config.vocab.words:
            raise ValueError("bundle vocabulary differs from model vocabulary")
        with torch.no_grad():
            self.word_emb.weight.copy_(bundle.word_embedding)
            self.char_table.copy_(bundle.char_table)
            self.shared_birnn.load_state_dict(bundle.lstm_state)

    # -- persistence ------------------------------------------------------------

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "slu", "config": self.config.to_meta()}
        if extra_meta:
            meta["metadata"] = extra_meta
        save_container(path, state_dict_to_arrays(self.state_dict()), meta)

    @classmethod
    def load(
        cls, path: str | Path, elmo_lm: BiLM | None = None
    ) -> "SLUModel":
        tensors, meta = load_container(path)
        if meta.get("kind") != "slu":
            raise ValueError(f"{path} is not an SLU model checkpoint")
        config = ModelConfig.from_meta(meta["config"])
        featurizer = Featurizer(
            config.mode, config.label_space, vocab=config.vocab, elmo_lm=elmo_lm
        )
        model = cls(config, featurizer)
        model.load_state_dict(arrays_to_state_dict(tensors))
        model.eval()
        return model


def build_model(
    config: ModelConfig,
    pretrained_table: torch.Tensor | None = None,
    shared_bundle: SharedLayerBundle | None = None,
    elmo_lm: BiLM | None = None,
) -> SLUModel:
    """Construct a model plus featurizer for one transfer condition."""
    featurizer = Featurizer(
        config.mode, config.label_space, vocab=config.vocab, elmo_lm=elmo_lm
    )
    model = SLUModel(config, featurizer)
    if pretrained_table is not None:
        if config.mode != "Pretrained":
            raise ValueError("pretrained vectors only apply to Pretrained mode")
        with torch.no_grad():
            model.fixed_table.copy_(pretrained_table)
    if shared_bundle is not None:
        model.load_shared_layer(shared_bundle)
    return model


def replace_heads(
    model: SLUModel, new_space: LabelSpace, keep: set[str] | frozenset[str]
) -> SLUModel:
    """New-label-space model with ``keep`` groups copied bit-exactly.

    The label-space-shaped groups (intent_softmax, et_projection, crf) are
    always freshly initialized and may not appear in ``keep``. Fixed input
    tables (char/pretrained buffers) carry over regardless: they are data,
    not trained state.
    """
    keep = set(keep)
    unknown = keep - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    clash = keep & HEAD_GROUPS
    if clash:
        raise ValueError(f"head groups are always re-initialized: {sorted(clash)}")

    new_config = replace(model.config, label_space=new_space)
    new_featurizer = Featurizer(
        new_config.mode,
        new_space,
        vocab=new_config.vocab,
        elmo_lm=model.featurizer.elmo_lm if model.featurizer else None,
    )
    new_model = SLUModel(new_config, new_featurizer)
    with torch.no_grad():
        if model.config.mode == "Pretrained":
            new_model.fixed_table.copy_(model.fixed_table)
        if model.config.mode == "ELMoL":
            new_model.char_table.copy_(model.char_table)
        old_groups = model.parameter_groups()
        new_groups = new_model.parameter_groups()
        for g in keep:
            for dst, src in zip(new_groups[g], old_groups[g], strict=True):
                if dst.shape != src.shape:
                    raise ValueError(f"group {g}: shape mismatch {dst.shape} vs {src.shape}")
                dst.copy_(src)
    return new_model
