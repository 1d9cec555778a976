"""Linear-chain CRF over entity tags.

Log-partition via the forward algorithm in log space, Viterbi decoding with
lowest-index tie-breaking, and negative log-likelihood. Single-sequence
functions take a (T, K) emission matrix and a TransitionMatrix; the
LinearChainCRF module adds batched, masked versions for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class TagSequence:
    tags: tuple[int, ...]
    score: float


@dataclass
class TransitionMatrix:
    """K x K tag-to-tag scores plus start and end score vectors."""

    transitions: torch.Tensor  # (K, K), [i, j] = score of i -> j
    start: torch.Tensor  # (K,)
    end: torch.Tensor  # (K,)

    def __post_init__(self):
        k = self.transitions.shape[0]
        if self.transitions.shape != (k, k):
            raise ValueError("transitions must be square")
        if self.start.shape != (k,) or self.end.shape != (k,):
            raise ValueError("start/end must have length K")
        for t in (self.transitions, self.start, self.end):
            if not torch.isfinite(t).all():
                raise ValueError("non-finite transition scores")

    @property
    def num_tags(self) -> int:
        return self.transitions.shape[0]

    @classmethod
    def zeros(cls, num_tags: int, dtype=torch.float64) -> "TransitionMatrix":
        return cls(
            torch.zeros(num_tags, num_tags, dtype=dtype),
            torch.zeros(num_tags, dtype=dtype),
            torch.zeros(num_tags, dtype=dtype),
        )


def _check_emissions(emissions: torch.Tensor, tr: TransitionMatrix):
    if emissions.ndim != 2:
        raise ValueError("emissions must be (T, K)")
    if emissions.shape[1] != tr.num_tags:
        raise ValueError(
            f"emissions have {emissions.shape[1]} tags, transitions {tr.num_tags}"
        )
    if emissions.shape[0] == 0:
        raise ValueError("empty emission sequence")
    if not torch.isfinite(emissions).all():
        raise ValueError("non-finite emission scores")


def path_score(
    emissions: torch.Tensor, tr: TransitionMatrix, tags: tuple[int, ...] | list[int]
) -> torch.Tensor:
    """Unnormalized score of one tag path, boundary terms included."""
    _check_emissions(emissions, tr)
    T, K = emissions.shape
    if len(tags) != T:
        raise ValueError(f"path length {len(tags)} != sequence length {T}")
    if any(t < 0 or t >= K for t in tags):
        raise ValueError("tag index out of range")
    score = tr.start[tags[0]] + emissions[0, tags[0]]
    for t in range(1, T):
        score = score + tr.transitions[tags[t - 1], tags[t]] + emissions[t, tags[t]]
    return score + tr.end[tags[-1]]


def log_partition(emissions: torch.Tensor, tr: TransitionMatrix) -> torch.Tensor:
    """log sum over all K^T paths of exp(path score)."""
    _check_emissions(emissions, tr)
    alpha = tr.start + emissions[0]
    for t in range(1, emissions.shape[0]):
        # alpha[i] + transitions[i, j] summed out over source tag i
        alpha = emissions[t] + torch.logsumexp(
            alpha.unsqueeze(1) + tr.transitions, dim=0
        )
    return torch.logsumexp(alpha + tr.end, dim=0)


def viterbi(emissions: torch.Tensor, tr: TransitionMatrix) -> TagSequence:
    """Argmax-scoring path; ties break toward the lowest tag index.

    Runs in float64 numpy; np.argmax's first-maximum rule gives the
    documented deterministic tie-breaking.
    """
    _check_emissions(emissions, tr)
    e = emissions.detach().cpu().numpy().astype(np.float64)
    trans = tr.transitions.detach().cpu().numpy().astype(np.float64)
    start = tr.start.detach().cpu().numpy().astype(np.float64)
    end = tr.end.detach().cpu().numpy().astype(np.float64)

    T, K = e.shape
    trellis = start + e[0]
    backptr = np.zeros((T, K), dtype=np.int64)
    for t in range(1, T):
        scores = trellis[:, None] + trans  # (K_prev, K_next)
        backptr[t] = np.argmax(scores, axis=0)
        trellis = e[t] + np.max(scores, axis=0)
    trellis = trellis + end
    best_last = int(np.argmax(trellis))
    path = [best_last]
    for t in range(T - 1, 0, -1):
        path.append(int(backptr[t, path[-1]]))
    path.reverse()
    return TagSequence(tuple(path), float(trellis[best_last]))


def crf_nll(
    emissions: torch.Tensor, tr: TransitionMatrix, gold: tuple[int, ...] | list[int]
) -> torch.Tensor:
    """log_partition minus the gold path score; >= 0 up to numerical slack."""
    return log_partition(emissions, tr) - path_score(emissions, tr, gold)


class LinearChainCRF(nn.Module):
    """Trainable CRF layer with batched masked NLL and per-sequence decoding."""

    def __init__(self, num_tags: int):
        super().__init__()
        if num_tags < 1:
            raise ValueError("need at least one tag")
        self.num_tags = num_tags
        # zero init: the model starts from a uniform path distribution
        self.transitions = nn.Parameter(torch.zeros(num_tags, num_tags))
        self.start = nn.Parameter(torch.zeros(num_tags))
        self.end = nn.Parameter(torch.zeros(num_tags))

    def matrix(self) -> TransitionMatrix:
        return TransitionMatrix(self.transitions, self.start, self.end)

    def nll(
        self, emissions: torch.Tensor, tags: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        """Per-sequence NLL for a padded batch.

        emissions: (B, T, K); tags: (B, T) long; lengths: (B,). Padded steps
        are excluded from both the partition and the gold score.
        """
        B, T, K = emissions.shape
        if K != self.num_tags:
            raise ValueError("emission tag dimension mismatch")
        steps = torch.arange(T, device=emissions.device)
        mask = steps.unsqueeze(0) < lengths.unsqueeze(1)  # (B, T)

        # forward algorithm
        alpha = self.start.unsqueeze(0) + emissions[:, 0]  # (B, K)
        for t in range(1, T):
            scores = alpha.unsqueeze(2) + self.transitions.unsqueeze(0)
            new_alpha = emissions[:, t] + torch.logsumexp(scores, dim=1)
            keep = mask[:, t].unsqueeze(1)
            alpha = torch.where(keep, new_alpha, alpha)
        last = lengths - 1
        log_z = torch.logsumexp(alpha + self.end.unsqueeze(0), dim=1)

        # gold path score
        batch_idx = torch.arange(B, device=emissions.device)
        emit = emissions.gather(2, tags.unsqueeze(2)).squeeze(2)  # (B, T)
        gold = self.start[tags[:, 0]] + (emit * mask).sum(dim=1)
        if T > 1:
            trans = self.transitions[tags[:, :-1], tags[:, 1:]]  # (B, T-1)
            gold = gold + (trans * mask[:, 1:]).sum(dim=1)
        gold = gold + self.end[tags[batch_idx, last]]
        return log_z - gold

    def decode(self, emissions: torch.Tensor, lengths: torch.Tensor) -> list[TagSequence]:
        tr = self.matrix()
        return [
            viterbi(emissions[b, : int(lengths[b])], tr)
            for b in range(emissions.shape[0])
        ]
