import itertools
import math
import random

import numpy as np
import pytest
import torch

from slukit.crf import (
    LinearChainCRF,
    TransitionMatrix,
    crf_nll,
    log_partition,
    path_score,
    viterbi,
)

# -- exhaustive path-enumeration oracle (plain python floats) -----------------


def oracle_all_paths(e, tr):
    """Yields (path, score) over all K^T tag paths."""
    T, K = len(e), len(e[0])
    for path in itertools.product(range(K), repeat=T):
        score = tr["start"][path[0]] + e[0][path[0]]
        for t in range(1, T):
            score += tr["trans"][path[t - 1]][path[t]] + e[t][path[t]]
        score += tr["end"][path[-1]]
        yield path, score


def oracle_log_partition(e, tr):
    scores = [s for _, s in oracle_all_paths(e, tr)]
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores))


def oracle_viterbi(e, tr, tie_tol=1e-12):
    """Argmax path under the documented tie rule.

    Lowest tag index at each backtrack step == among maximal-score paths,
    the one whose reversed tag tuple is lexicographically smallest (the last
    position is decided first during backtracking).
    """
    best_path, best_score = None, -math.inf
    for path, score in oracle_all_paths(e, tr):
        better = score > best_score + tie_tol
        tied = abs(score - best_score) <= tie_tol and best_path is not None
        if better or (tied and tuple(reversed(path)) < tuple(reversed(best_path))):
            best_path, best_score = path, max(score, best_score)
    return best_path, best_score


def random_instance(rng, T, K, scale=4.0):
    e = [[rng.uniform(-scale, scale) for _ in range(K)] for _ in range(T)]
    tr = {
        "trans": [[rng.uniform(-scale, scale) for _ in range(K)] for _ in range(K)],
        "start": [rng.uniform(-scale, scale) for _ in range(K)],
        "end": [rng.uniform(-scale, scale) for _ in range(K)],
    }
    return e, tr


def to_torch(e, tr):
    return (
        torch.tensor(e, dtype=torch.float64),
        TransitionMatrix(
            torch.tensor(tr["trans"], dtype=torch.float64),
            torch.tensor(tr["start"], dtype=torch.float64),
            torch.tensor(tr["end"], dtype=torch.float64),
        ),
    )


# -- log_partition ------------------------------------------------------------


def test_single_step_is_logsumexp():
    e, tr = to_torch([[1.7, -0.3]], {"trans": [[0, 0], [0, 0]], "start": [0, 0], "end": [0, 0]})
    expected = math.log(math.exp(1.7) + math.exp(-0.3))
    assert float(log_partition(e, tr)) == pytest.approx(expected, abs=1e-12)


def test_zero_scores_count_paths():
    T, K = 5, 3
    e, tr = to_torch([[0.0] * K] * T, {"trans": [[0] * K] * K, "start": [0] * K, "end": [0] * K})
    assert float(log_partition(e, tr)) == pytest.approx(T * math.log(K), abs=1e-12)


def test_log_partition_matches_enumeration():
    rng = random.Random(42)
    for _ in range(50):
        T, K = rng.randint(1, 3), rng.randint(1, 3)
        e, tr = random_instance(rng, T, K)
        te, ttr = to_torch(e, tr)
        assert float(log_partition(te, ttr)) == pytest.approx(
            oracle_log_partition(e, tr), abs=1e-8
        )


def test_log_partition_no_overflow_at_large_scores():
    e, tr = to_torch(
        [[50.0, -50.0]] * 128,
        {"trans": [[50, -50], [-50, 50]], "start": [50, -50], "end": [50, 50]},
    )
    value = float(log_partition(e, tr))
    assert math.isfinite(value)


def test_log_partition_rejects_nonfinite():
    e = torch.tensor([[float("nan"), 0.0]], dtype=torch.float64)
    tr = TransitionMatrix.zeros(2)
    with pytest.raises(ValueError):
        log_partition(e, tr)


def test_emission_shift_moves_log_partition_by_constant():
    rng = random.Random(1)
    e, tr = random_instance(rng, 4, 3)
    te, ttr = to_torch(e, tr)
    base = float(log_partition(te, ttr))
    shifted = te.clone()
    shifted[2] += 2.5
    assert float(log_partition(shifted, ttr)) == pytest.approx(base + 2.5, abs=1e-10)
    assert viterbi(shifted, ttr).tags == viterbi(te, ttr).tags


# -- viterbi -----------------------------------------------------------------


def test_viterbi_single_step():
    e, tr = to_torch([[5.0, 3.0]], {"trans": [[0, 0], [0, 0]], "start": [0, 0], "end": [0, 0]})
    seq = viterbi(e, tr)
    assert seq.tags == (0,)
    assert seq.score == pytest.approx(5.0)


def test_viterbi_all_ties_lowest_index():
    e, tr = to_torch([[1.0] * 3] * 4, {"trans": [[0] * 3] * 3, "start": [0] * 3, "end": [0] * 3})
    assert viterbi(e, tr).tags == (0, 0, 0, 0)


def test_viterbi_matches_enumeration():
    rng = random.Random(43)
    for _ in range(50):
        T, K = rng.randint(1, 4), rng.randint(1, 3)
        e, tr = random_instance(rng, T, K)
        te, ttr = to_torch(e, tr)
        got = viterbi(te, ttr)
        want_path, want_score = oracle_viterbi(e, tr)
        assert got.score == pytest.approx(want_score, abs=1e-8)
        assert got.tags == want_path


def test_viterbi_ties_match_oracle_rule():
    # integer scores force exact ties
    rng = random.Random(44)
    for _ in range(30):
        T, K = rng.randint(2, 4), rng.randint(2, 3)
        e = [[float(rng.randint(0, 1)) for _ in range(K)] for _ in range(T)]
        tr = {
            "trans": [[float(rng.randint(0, 1)) for _ in range(K)] for _ in range(K)],
            "start": [0.0] * K,
            "end": [0.0] * K,
        }
        te, ttr = to_torch(e, tr)
        got = viterbi(te, ttr)
        want_path, want_score = oracle_viterbi(e, tr)
        assert got.score == pytest.approx(want_score, abs=1e-9)
        assert got.tags == want_path


def test_viterbi_score_below_log_partition():
    rng = random.Random(45)
    for _ in range(20):
        e, tr = random_instance(rng, 5, 4)
        te, ttr = to_torch(e, tr)
        assert viterbi(te, ttr).score <= float(log_partition(te, ttr)) + 1e-9


# -- NLL ---------------------------------------------------------------------


def test_nll_uniform_identity():
    e, tr = to_torch([[0.0, 0.0]] * 2, {"trans": [[0, 0], [0, 0]], "start": [0, 0], "end": [0, 0]})
    assert float(crf_nll(e, tr, [0, 1])) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_nll_peaked_model_near_zero():
    e, tr = to_torch(
        [[30.0, -30.0], [-30.0, 30.0]],
        {"trans": [[0, 0], [0, 0]], "start": [0, 0], "end": [0, 0]},
    )
    assert float(crf_nll(e, tr, [0, 1])) == pytest.approx(0.0, abs=1e-6)


def test_nll_matches_enumerated_probability():
    rng = random.Random(46)
    for _ in range(30):
        T, K = rng.randint(1, 3), rng.randint(1, 3)
        e, tr = random_instance(rng, T, K)
        gold = tuple(rng.randrange(K) for _ in range(T))
        te, ttr = to_torch(e, tr)
        log_z = oracle_log_partition(e, tr)
        gold_score = dict(oracle_all_paths(e, tr))[gold]
        assert float(crf_nll(te, ttr, list(gold))) == pytest.approx(
            log_z - gold_score, abs=1e-8
        )


def test_nll_nonnegative():
    rng = random.Random(47)
    for _ in range(50):
        T, K = rng.randint(1, 5), rng.randint(1, 4)
        e, tr = random_instance(rng, T, K)
        te, ttr = to_torch(e, tr)
        gold = [rng.randrange(K) for _ in range(T)]
        assert float(crf_nll(te, ttr, gold)) >= -1e-9


def test_nll_rejects_bad_gold():
    e, tr = to_torch([[0.0, 0.0]], {"trans": [[0, 0], [0, 0]], "start": [0, 0], "end": [0, 0]})
    with pytest.raises(ValueError):
        crf_nll(e, tr, [2])
    with pytest.raises(ValueError):
        crf_nll(e, tr, [0, 0])


# -- normalization and gradients -------------------------------------------------


def test_path_probabilities_normalize():
    rng = random.Random(48)
    for _ in range(10):
        T, K = rng.randint(1, 4), rng.randint(1, 4)
        e, tr = random_instance(rng, T, K, scale=2.0)
        te, ttr = to_torch(e, tr)
        log_z = float(log_partition(te, ttr))
        total = sum(math.exp(s - log_z) for _, s in oracle_all_paths(e, tr))
        assert total == pytest.approx(1.0, abs=1e-6)


def test_nll_gradients_match_finite_differences():
    rng = random.Random(49)
    T, K = 4, 3
    e, tr = random_instance(rng, T, K, scale=1.5)
    gold = [rng.randrange(K) for _ in range(T)]
    te = torch.tensor(e, dtype=torch.float64, requires_grad=True)
    trans = torch.tensor(tr["trans"], dtype=torch.float64, requires_grad=True)
    start = torch.tensor(tr["start"], dtype=torch.float64, requires_grad=True)
    end = torch.tensor(tr["end"], dtype=torch.float64, requires_grad=True)

    loss = crf_nll(te, TransitionMatrix(trans, start, end), gold)
    loss.backward()

    h = 1e-5

    def numeric(param):
        grad = torch.zeros_like(param)
        flat = param.detach().reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            for sign in (+1, -1):
                flat[i] = orig + sign * h
                val = float(
                    crf_nll(
                        te.detach(), TransitionMatrix(trans.detach(), start.detach(), end.detach()), gold
                    )
                )
                if sign > 0:
                    plus = val
                else:
                    minus = val
            flat[i] = orig
            grad.reshape(-1)[i] = (plus - minus) / (2 * h)
        return grad

    for param in (te, trans, start, end):
        approx = numeric(param)
        denom = param.grad.abs().clamp_min(1e-8)
        rel = ((param.grad - approx).abs() / denom).max()
        assert float(rel) < 1e-4


# -- batched module ------------------------------------------------------------


def test_batched_nll_matches_single():
    rng = random.Random(50)
    crf = LinearChainCRF(3)
    with torch.no_grad():
        crf.transitions.copy_(torch.randn(3, 3))
        crf.start.copy_(torch.randn(3))
        crf.end.copy_(torch.randn(3))
    lengths = [2, 4, 1]
    T = max(lengths)
    emissions = torch.randn(len(lengths), T, 3)
    tags = torch.from_numpy(np.array([[1, 2, 0, 0], [0, 1, 2, 1], [2, 0, 0, 0]]))
    batched = crf.nll(emissions, tags, torch.tensor(lengths))
    tr = TransitionMatrix(
        crf.transitions.double(), crf.start.double(), crf.end.double()
    )
    for b, L in enumerate(lengths):
        single = crf_nll(emissions[b, :L].double(), tr, tags[b, :L].tolist())
        assert float(batched[b]) == pytest.approx(float(single), rel=1e-5, abs=1e-5)


def test_decode_respects_lengths():
    crf = LinearChainCRF(2)
    emissions = torch.tensor([[[3.0, 0.0], [0.0, 3.0], [9.0, 9.0]]])
    seqs = crf.decode(emissions, torch.tensor([2]))
    assert len(seqs) == 1
    assert seqs[0].tags == (0, 1)
