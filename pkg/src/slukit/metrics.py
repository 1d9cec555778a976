"""Evaluation: intent accuracy, exact-span entity F1, sentence error rate,
and paired significance testing.

Prediction files reuse the corpus CoNLL-TSV layout with predicted columns
appended: a second ``# predicted_intent:`` header and a third tag column.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from scipy import stats

from .corpus import entity_type_of


@dataclass(frozen=True)
class EvalPair:
    gold_intent: str
    gold_tags: tuple[str, ...]
    pred_intent: str
    pred_tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.gold_tags) != len(self.pred_tags):
            raise ValueError(
                f"gold has {len(self.gold_tags)} tags, pred has {len(self.pred_tags)}"
            )


@dataclass(frozen=True)
class MetricReport:
    ica: float
    ef1: float
    ser: float
    n_utterances: int
    n_gold_spans: int
    n_pred_spans: int
    n_matched_spans: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def extract_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Entity spans as (type, start, end_exclusive) from a BIO sequence.

    Maximal B-X (I-X)* runs; an orphan I-X opens a new span, mirroring the
    corpus repair rule and the observable CoNLL-2003 script behaviour.
    """
    spans: set[tuple[str, int, int]] = set()
    current: tuple[str, int] | None = None  # (type, start)
    for i, tag in enumerate(tags):
        etype = entity_type_of(tag)
        if tag.startswith("B-") or (
            tag.startswith("I-") and (current is None or current[0] != etype)
        ):
            if current is not None:
                spans.add((current[0], current[1], i))
            current = (etype, i)
        elif tag == "O":
            if current is not None:
                spans.add((current[0], current[1], i))
            current = None
        # I-X continuing a same-type span: extend
    if current is not None:
        spans.add((current[0], current[1], len(tags)))
    return spans


def intent_accuracy(pairs: Sequence[EvalPair]) -> float:
    """Fraction of utterances with correctly predicted intent."""
    if not pairs:
        raise ValueError("no evaluation pairs")
    return sum(p.gold_intent == p.pred_intent for p in pairs) / len(pairs)


def span_counts(pairs: Sequence[EvalPair]) -> tuple[int, int, int]:
    """(gold, predicted, matched) span totals, micro across entity types."""
    n_gold = n_pred = n_match = 0
    for p in pairs:
        gold = extract_spans(p.gold_tags)
        pred = extract_spans(p.pred_tags)
        n_gold += len(gold)
        n_pred += len(pred)
        n_match += len(gold & pred)
    return n_gold, n_pred, n_match


def entity_f1(pairs: Sequence[EvalPair]) -> float:
    """Exact-boundary, exact-type span F1 (micro-averaged).

    Zero predicted (or gold) spans gives P (or R) = 0; P+R = 0 gives F1 = 0.
    """
    if not pairs:
        raise ValueError("no evaluation pairs")
    n_gold, n_pred, n_match = span_counts(pairs)
    if n_gold == 0 and n_pred == 0:
        warnings.warn("no gold and no predicted spans; reporting F1 = 0")
        return 0.0
    precision = n_match / n_pred if n_pred else 0.0
    recall = n_match / n_gold if n_gold else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def sentence_error_rate(pairs: Sequence[EvalPair]) -> float:
    """Fraction of utterances with a wrong intent or any wrong tag position."""
    if not pairs:
        raise ValueError("no evaluation pairs")
    errors = sum(
        p.gold_intent != p.pred_intent or tuple(p.gold_tags) != tuple(p.pred_tags)
        for p in pairs
    )
    return errors / len(pairs)


def evaluate(pairs: Sequence[EvalPair]) -> MetricReport:
    if not pairs:
        raise ValueError("no evaluation pairs")
    n_gold, n_pred, n_match = span_counts(pairs)
    return MetricReport(
        ica=intent_accuracy(pairs),
        ef1=entity_f1(pairs),
        ser=sentence_error_rate(pairs),
        n_utterances=len(pairs),
        n_gold_spans=n_gold,
        n_pred_spans=n_pred,
        n_matched_spans=n_match,
    )


def paired_significance(
    runs_a: Sequence[float], runs_b: Sequence[float], alpha: float = 0.05
) -> tuple[float, bool]:
    """Two-sided paired t-test on per-seed metric values.

    Returns (p_value, significant at ``alpha``). Degenerate case: zero
    variance of the differences gives p = 1.0 for equal means and p = 0.0
    otherwise.
    """
    if len(runs_a) != len(runs_b):
        raise ValueError("paired test needs equal-length runs")
    if len(runs_a) < 2:
        raise ValueError("paired test needs at least 2 paired runs")
    diffs = [a - b for a, b in zip(runs_a, runs_b)]
    mean = sum(diffs) / len(diffs)
    if all(d == diffs[0] for d in diffs):
        p = 1.0 if mean == 0.0 else 0.0
        return p, p < alpha
    p = float(stats.ttest_rel(runs_a, runs_b).pvalue)
    return p, p < alpha


# ---------------------------------------------------------------------------
# Prediction-file interface


def write_prediction_file(
    path: str | Path,
    tokens_per_utt: Sequence[Sequence[str]],
    pairs: Sequence[EvalPair],
) -> None:
    if len(tokens_per_utt) != len(pairs):
        raise ValueError("one token sequence per evaluation pair required")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for tokens, pair in zip(tokens_per_utt, pairs):
            fh.write(f"# intent: {pair.gold_intent}\n")
            fh.write(f"# predicted_intent: {pair.pred_intent}\n")
            for tok, gold, pred in zip(tokens, pair.gold_tags, pair.pred_tags):
                fh.write(f"{tok}\t{gold}\t{pred}\n")
            fh.write("\n")


def read_prediction_file(path: str | Path) -> list[EvalPair]:
    pairs: list[EvalPair] = []
    gold_intent = pred_intent = None
    gold_tags: list[str] = []
    pred_tags: list[str] = []

    def flush():
        nonlocal gold_intent, pred_intent, gold_tags, pred_tags
        if gold_intent is None and not gold_tags:
            return
        if gold_intent is None or pred_intent is None:
            raise ValueError(f"{path}: utterance missing intent headers")
        pairs.append(
            EvalPair(gold_intent, tuple(gold_tags), pred_intent, tuple(pred_tags))
        )
        gold_intent = pred_intent = None
        gold_tags, pred_tags = [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            m = re.match(r"#\s*(intent|predicted_intent):\s*(\S+)\s*$", line)
            if m:
                if m.group(1) == "intent":
                    gold_intent = m.group(2)
                else:
                    pred_intent = m.group(2)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected '<token>\\t<gold>\\t<pred>'"
                )
            gold_tags.append(parts[1])
            pred_tags.append(parts[2])
    flush()
    if not pairs:
        raise ValueError(f"{path}: no predictions found")
    return pairs
