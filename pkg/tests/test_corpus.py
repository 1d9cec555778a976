import json

import pytest
from hypothesis import given, strategies as st

from slukit.corpus import (
    CorpusError,
    FormatError,
    LabelSpace,
    Utterance,
    ValidationError,
    build_vocab,
    is_valid_bio,
    load_labeled,
    load_unlabeled,
    repair_bio,
    sample_low_resource,
    tokenize,
)

CONLL_SAMPLE = """\
# intent: get_recipe
how\tO
to\tO
make\tO
kadhai\tB-dish
chicken\tI-dish

# intent: play_music
play\tO
yellow\tB-song
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# -- BIO ---------------------------------------------------------------------


def test_repair_orphan_inside_tag():
    fixed, n = repair_bio(["O", "I-Dish"])
    assert fixed == ["O", "B-Dish"]
    assert n == 1


def test_repair_type_switch_and_start():
    fixed, n = repair_bio(["I-a", "B-b", "I-a", "I-a"])
    assert fixed == ["B-a", "B-b", "B-a", "I-a"]
    assert n == 2


def test_repair_keeps_valid_sequences():
    tags = ["O", "B-x", "I-x", "O", "B-y"]
    fixed, n = repair_bio(tags)
    assert fixed == tags
    assert n == 0


def test_repair_rejects_malformed_tag():
    with pytest.raises(ValidationError):
        repair_bio(["B-x", "garbage"])


@given(
    st.lists(
        st.sampled_from(["O", "B-a", "I-a", "B-b", "I-b"]), min_size=1, max_size=12
    )
)
def test_repair_roundtrip_always_valid(tags):
    fixed, _ = repair_bio(tags)
    assert is_valid_bio(fixed)
    # idempotent
    again, n = repair_bio(fixed)
    assert again == fixed
    assert n == 0


# -- loading -------------------------------------------------------------------


def test_load_conll_single_file(tmp_path):
    p = write(tmp_path, "train.tsv", CONLL_SAMPLE)
    ds = load_labeled(p)
    assert len(ds.train) == 2
    assert ds.train[0].tokens == ("how", "to", "make", "kadhai", "chicken")
    assert ds.train[0].intent == "get_recipe"
    assert ds.train[0].bio_tags[3:] == ("B-dish", "I-dish")
    assert ds.label_space.intents == ("get_recipe", "play_music")
    assert ds.label_space.entity_types == ("dish", "song")


def test_load_directory_with_splits(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    write(d, "train.tsv", CONLL_SAMPLE)
    write(d, "dev.tsv", "# intent: play_music\nplay\tO\n")
    write(d, "test.tsv", "# intent: get_recipe\nbake\tO\n")
    ds = load_labeled(d)
    assert (len(ds.train), len(ds.dev), len(ds.test)) == (2, 1, 1)
    assert ds.name == "data"


def test_load_orphan_repair(tmp_path):
    p = write(tmp_path, "train.tsv", "# intent: x\na\tO\nb\tI-Dish\n")
    ds = load_labeled(p)
    assert ds.train[0].bio_tags == ("O", "B-Dish")
    assert ds.repair_count == 1


def test_load_reports_line_numbers(tmp_path):
    p = write(tmp_path, "bad.tsv", "# intent: x\ntoken-without-tag\n")
    with pytest.raises(FormatError) as err:
        load_labeled(p)
    assert ":2:" in str(err.value)


def test_load_missing_intent_header(tmp_path):
    p = write(tmp_path, "bad.tsv", "a\tO\n")
    with pytest.raises(FormatError):
        load_labeled(p)


def test_load_json_format(tmp_path):
    data = [
        {"tokens": ["play", "yellow"], "tags": ["O", "B-song"], "intent": "play_music"}
    ]
    p = write(tmp_path, "train.json", json.dumps(data))
    ds = load_labeled(p, fmt="json")
    assert ds.train[0].tokens == ("play", "yellow")


def test_load_validates_against_supplied_space(tmp_path):
    p = write(tmp_path, "train.tsv", CONLL_SAMPLE)
    space = LabelSpace(("get_recipe",), ("dish",))
    with pytest.raises(ValidationError):
        load_labeled(p, label_space=space)


def test_load_unlabeled_dedups(tmp_path):
    p = write(tmp_path, "a.txt", "a b\na b\n")
    corpus = load_unlabeled([p])
    assert len(corpus.sentences) == 1
    assert corpus.token_count == 2


def test_load_unlabeled_pools_counts(tmp_path):
    p1 = write(tmp_path, "a.txt", "a b\n")
    p2 = write(tmp_path, "b.txt", "c d e\n")
    p3 = write(tmp_path, "c.txt", "f g h i j\n")
    corpus = load_unlabeled([p1, p2, p3])
    assert corpus.token_count == 10
    assert len(corpus.sentences) == 3


def test_load_unlabeled_empty_pool(tmp_path):
    p = write(tmp_path, "empty.txt", "\n\n")
    with pytest.raises(CorpusError):
        load_unlabeled([p])


def test_tokenize_lowercases():
    assert tokenize("Play  Yellow\n") == ["play", "yellow"]


# -- vocabulary --------------------------------------------------------------


def test_vocab_min_count(tmp_path):
    p = write(tmp_path, "t.txt", "a a b\n")
    corpus = load_unlabeled([p])
    vocab = build_vocab(corpus, min_count=2)
    assert vocab.non_special_size() == 1
    assert "a" in vocab
    assert "b" not in vocab


def test_vocab_unknown_fallback(tmp_path):
    p = write(tmp_path, "t.txt", "a b\n")
    vocab = build_vocab(load_unlabeled([p]))
    assert vocab.index("unseen-word") == vocab.unk_index


def test_vocab_deterministic(target_dataset):
    v1 = build_vocab(target_dataset)
    v2 = build_vocab(target_dataset)
    assert v1.words == v2.words


def test_vocab_frequency_then_lexicographic(tmp_path):
    p = write(tmp_path, "t.txt", "b b a a c\n")
    vocab = build_vocab(load_unlabeled([p]))
    # a and b tie at 2 -> lexicographic; c trails at 1
    assert vocab.words[4:] == ["a", "b", "c"]


# -- sampling -----------------------------------------------------------------


def test_sample_deterministic(target_dataset):
    s1 = sample_low_resource(target_dataset, 30, seed=7)
    s2 = sample_low_resource(target_dataset, 30, seed=7)
    assert s1.train == s2.train
    assert len(s1.train) == 30


def test_sample_subset_and_untouched_splits(target_dataset):
    s = sample_low_resource(target_dataset, 10, seed=3)
    original = set(target_dataset.train)
    assert all(u in original for u in s.train)
    assert s.dev == target_dataset.dev
    assert s.test == target_dataset.test


def test_sample_size_guard(target_dataset):
    with pytest.raises(ValueError):
        sample_low_resource(target_dataset, len(target_dataset.train) + 1, seed=0)


def test_sample_different_seeds_differ(target_dataset):
    a = sample_low_resource(target_dataset, 30, seed=1)
    b = sample_low_resource(target_dataset, 30, seed=2)
    assert a.train != b.train


# -- invariants ----------------------------------------------------------------


def test_utterance_length_mismatch_rejected():
    with pytest.raises(ValidationError):
        Utterance(("a", "b"), ("O",), "x")


def test_label_space_sorted_deterministic():
    s = LabelSpace(("zeta", "alpha"), ("b", "a"))
    assert s.intents == ("alpha", "zeta")
    assert s.bio_tags == ("O", "B-a", "I-a", "B-b", "I-b")
