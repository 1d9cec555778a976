import math
import random

import mpmath
import pytest
from hypothesis import given, settings, strategies as st

from slukit.metrics import (
    EvalPair,
    entity_f1,
    evaluate,
    extract_spans,
    intent_accuracy,
    paired_significance,
    read_prediction_file,
    sentence_error_rate,
    write_prediction_file,
)

# -- independent span oracle ---------------------------------------------------
# Position-by-position scan: for every index that begins a chunk (B-X, or an
# I-X whose predecessor does not continue X), walk right over I-X only.


def oracle_spans(tags):
    spans = set()
    n = len(tags)
    for start in range(n):
        tag = tags[start]
        if tag == "O":
            continue
        etype = tag[2:]
        begins = tag.startswith("B-") or start == 0 or tags[start - 1] == "O" or tags[
            start - 1
        ][2:] != etype
        if not begins:
            continue
        end = start + 1
        while end < n and tags[end] == f"I-{etype}":
            end += 1
        spans.add((etype, start, end))
    return spans


def oracle_f1(pairs):
    tp = fp = fn = 0
    for p in pairs:
        gold = oracle_spans(list(p.gold_tags))
        pred = oracle_spans(list(p.pred_tags))
        tp += len(gold & pred)
        fp += len(pred - gold)
        fn += len(gold - pred)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


TAGS = ["O", "B-x", "I-x", "B-y", "I-y"]


def random_pair(rng, max_len=10):
    n = rng.randint(1, max_len)
    gold = tuple(rng.choice(TAGS) for _ in range(n))
    pred = tuple(rng.choice(TAGS) for _ in range(n))
    return EvalPair("i", gold, "i", pred)


# -- entity F1 --------------------------------------------------------------


def test_identical_sequences_full_score():
    pairs = [EvalPair("a", ("B-x", "I-x", "O"), "a", ("B-x", "I-x", "O"))]
    assert entity_f1(pairs) == 1.0


def test_truncated_span_no_credit():
    pairs = [EvalPair("a", ("B-x", "I-x"), "a", ("B-x", "O"))]
    assert oracle_f1(pairs) == 0.0
    assert entity_f1(pairs) == 0.0


def test_half_credit_on_one_of_two_spans():
    pairs = [EvalPair("a", ("B-x", "O", "B-y"), "a", ("B-x", "O", "B-x"))]
    assert oracle_f1(pairs) == 0.5
    assert entity_f1(pairs) == 0.5


def test_f1_matches_oracle_on_random_pairs():
    rng = random.Random(123)
    for _ in range(1000):
        pairs = [random_pair(rng) for _ in range(rng.randint(1, 4))]
        assert entity_f1(pairs) == oracle_f1(pairs)


def test_f1_zero_spans_warns():
    pairs = [EvalPair("a", ("O",), "a", ("O",))]
    with pytest.warns(UserWarning):
        assert entity_f1(pairs) == 0.0


@given(
    st.lists(
        st.tuples(
            st.lists(st.sampled_from(TAGS), min_size=1, max_size=8),
            st.lists(st.sampled_from(TAGS), min_size=1, max_size=8),
        ),
        min_size=1,
        max_size=5,
    )
)
@settings(max_examples=200)
def test_f1_oracle_property(raw):
    pairs = [
        EvalPair("i", tuple(g), "i", tuple(p[: len(g)] + ["O"] * (len(g) - len(p))))
        for g, p in raw
    ]
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # all-O corpora warn by design
        assert entity_f1(pairs) == oracle_f1(pairs)


def test_f1_permutation_invariant():
    rng = random.Random(7)
    pairs = [random_pair(rng) for _ in range(10)]
    shuffled = list(pairs)
    rng.shuffle(shuffled)
    assert entity_f1(pairs) == entity_f1(shuffled)


def test_extract_spans_exclusive_end():
    assert extract_spans(["B-x", "I-x", "O", "B-y"]) == {("x", 0, 2), ("y", 3, 4)}


# -- ICA / SER ------------------------------------------------------------------


def test_intent_accuracy_exact():
    pairs = [
        EvalPair("a", ("O",), "a", ("O",)),
        EvalPair("a", ("O",), "b", ("O",)),
        EvalPair("c", ("O",), "c", ("O",)),
        EvalPair("d", ("O",), "d", ("O",)),
    ]
    assert intent_accuracy(pairs) == 0.75


def test_ser_single_tag_error():
    ok = EvalPair("a", ("O", "O"), "a", ("O", "O"))
    bad = EvalPair("a", ("O", "B-x"), "a", ("O", "O"))
    assert sentence_error_rate([ok, ok, ok, bad]) == 0.25


def test_ser_counts_intent_error_once():
    p = EvalPair("a", ("O", "B-x"), "b", ("O", "B-x"))
    assert sentence_error_rate([p]) == 1.0


def test_ser_all_perfect():
    p = EvalPair("a", ("B-x",), "a", ("B-x",))
    assert sentence_error_rate([p, p]) == 0.0


def test_ser_lower_bounded_by_intent_errors():
    rng = random.Random(99)
    for _ in range(200):
        pairs = []
        for _ in range(rng.randint(1, 6)):
            p = random_pair(rng)
            if rng.random() < 0.5:
                p = EvalPair("other", p.gold_tags, p.pred_intent, p.pred_tags)
            pairs.append(p)
        assert sentence_error_rate(pairs) >= 1 - intent_accuracy(pairs) - 1e-12


def test_empty_pairs_rejected():
    for fn in (intent_accuracy, entity_f1, sentence_error_rate, evaluate):
        with pytest.raises(ValueError):
            fn([])


def test_report_consistency():
    rng = random.Random(5)
    pairs = [random_pair(rng) for _ in range(20)]
    report = evaluate(pairs)
    assert report.ica == intent_accuracy(pairs)
    assert report.ef1 == entity_f1(pairs)
    assert report.ser == sentence_error_rate(pairs)
    assert report.n_utterances == 20


# -- significance -----------------------------------------------------------------


def oracle_paired_t_pvalue(a, b):
    """Closed-form paired t-test p-value via the t CDF (regularized beta)."""
    diffs = [x - y for x, y in zip(a, b)]
    n = len(diffs)
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    t = mean / math.sqrt(var / n)
    nu = n - 1
    x = nu / (nu + t * t)
    return float(mpmath.betainc(nu / 2, 0.5, 0, x, regularized=True))


def test_identical_lists_not_significant():
    p, sig = paired_significance([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert p == 1.0
    assert not sig


def test_constant_shift_significant():
    a = [10.01, 10.02, 9.99, 10.00, 10.01]
    b = [x - 10 for x in a]
    b = [x + 0.001 * i for i, x in enumerate(b)]  # tiny within-list variance
    p, sig = paired_significance(a, b)
    assert sig and p < 1e-4


def test_pvalue_matches_t_distribution_oracle():
    rng = random.Random(11)
    for _ in range(20):
        a = [rng.gauss(0.5, 0.1) for _ in range(5)]
        b = [rng.gauss(0.45, 0.1) for _ in range(5)]
        p, _ = paired_significance(a, b)
        assert abs(p - oracle_paired_t_pvalue(a, b)) < 1e-3


def test_mismatched_lengths_rejected():
    with pytest.raises(ValueError):
        paired_significance([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        paired_significance([1.0], [2.0])


# -- prediction files ----------------------------------------------------------


def test_prediction_file_roundtrip(tmp_path):
    pairs = [
        EvalPair("play", ("O", "B-song"), "play", ("O", "B-song")),
        EvalPair("alarm", ("O", "B-time", "I-time"), "weather", ("O", "O", "B-time")),
    ]
    tokens = [("play", "yellow"), ("at", "nine", "thirty")]
    path = tmp_path / "pred.tsv"
    write_prediction_file(path, tokens, pairs)
    loaded = read_prediction_file(path)
    assert loaded == pairs
    assert evaluate(loaded) == evaluate(pairs)
