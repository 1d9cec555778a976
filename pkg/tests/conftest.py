"""Shared fixtures: a small synthetic SLU world with two domains, plus
pretrained toy language models (session-scoped; LM training is the slow part).
"""

from __future__ import annotations

import itertools
import random

import pytest
import torch

from slukit.corpus import Dataset, LabelSpace, UnlabeledCorpus, Utterance, build_vocab
from slukit.lm import LMConfig, train_bilm

# -- target domain: media/weather/alarm ------------------------------------

SONGS = [
    ("yellow",), ("bohemian", "rhapsody"), ("hey", "jude"), ("let", "it", "be"),
    ("purple", "rain"), ("imagine",), ("yesterday",), ("thriller",),
    ("hotel", "california"), ("stairway", "to", "heaven"), ("lucy", "in", "the", "sky"),
    ("wonderwall",),
]
CITIES = [
    ("london",), ("new", "york"), ("paris",), ("tokyo",), ("berlin",),
    ("san", "francisco"), ("rome",), ("madrid",), ("oslo",), ("cairo",),
]
TIMES = [
    ("five", "pm"), ("noon",), ("seven", "am"), ("nine", "thirty"),
    ("six", "oclock"), ("midnight",), ("eight", "fifteen"), ("ten", "am"),
]

PLAY_PREFIXES = [("play",), ("please", "play"), ("i", "want", "to", "hear"), ("put", "on")]
WEATHER_PREFIXES = [("weather", "in",), ("what", "is", "the", "weather", "in"), ("forecast", "for")]
ALARM_PREFIXES = [("set", "alarm", "for"), ("wake", "me", "at"), ("alarm", "at")]
ALARM_SUFFIXES = [(), ("tomorrow",)]


def _slot_utterance(prefix, filler, slot, intent, suffix=()):
    tokens = list(prefix) + list(filler) + list(suffix)
    tags = (
        ["O"] * len(prefix)
        + [f"B-{slot}"]
        + [f"I-{slot}"] * (len(filler) - 1)
        + ["O"] * len(suffix)
    )
    return Utterance(tuple(tokens), tuple(tags), intent)


def all_target_utterances() -> list[Utterance]:
    utts = []
    for prefix, song in itertools.product(PLAY_PREFIXES, SONGS):
        utts.append(_slot_utterance(prefix, song, "song", "play_music"))
    for prefix, city in itertools.product(WEATHER_PREFIXES, CITIES):
        utts.append(_slot_utterance(prefix, city, "city", "get_weather"))
    for prefix, t, suffix in itertools.product(ALARM_PREFIXES, TIMES, ALARM_SUFFIXES):
        utts.append(_slot_utterance(prefix, t, "time", "set_alarm", suffix))
    return utts


# -- source domain: restaurant ------------------------------------------------

CUISINES = [("italian",), ("thai",), ("sushi",), ("mexican",), ("french",), ("indian",)]
PLACES = [("marios",), ("golden", "dragon"), ("little", "tokyo"), ("chez", "pierre")]
BOOK_PREFIXES = [("book", "a", "table", "at"), ("reserve",), ("i", "want", "a", "table", "at")]
ORDER_PREFIXES = [("order",), ("i", "want", "to", "order"), ("get", "me")]


def all_source_utterances() -> list[Utterance]:
    utts = []
    for prefix, place in itertools.product(BOOK_PREFIXES, PLACES):
        utts.append(_slot_utterance(prefix, place, "restaurant", "book_table"))
    for prefix, cuisine in itertools.product(ORDER_PREFIXES, CUISINES):
        utts.append(_slot_utterance(prefix, cuisine, "cuisine", "order_food"))
    return utts


def split_dataset(name: str, utterances: list[Utterance], seed: int,
                  n_dev: int, n_test: int) -> Dataset:
    rng = random.Random(seed)
    utts = list(utterances)
    rng.shuffle(utts)
    n_train = len(utts) - n_dev - n_test
    return Dataset(
        name=name,
        train=tuple(utts[:n_train]),
        dev=tuple(utts[n_train : n_train + n_dev]),
        test=tuple(utts[n_train + n_dev :]),
        label_space=LabelSpace.from_utterances(utts),
    )


def text_corpus(utterances) -> UnlabeledCorpus:
    seen = {}
    for u in utterances:
        seen.setdefault(tuple(u.tokens), None)
    sents = tuple(seen.keys())
    return UnlabeledCorpus(sents, sum(len(s) for s in sents))


@pytest.fixture(scope="session")
def target_dataset() -> Dataset:
    return split_dataset("toy-target", all_target_utterances(), seed=13, n_dev=20, n_test=26)


@pytest.fixture(scope="session")
def source_dataset() -> Dataset:
    return split_dataset("toy-source", all_source_utterances(), seed=29, n_dev=6, n_test=6)


@pytest.fixture(scope="session")
def lm_corpus(target_dataset, source_dataset) -> UnlabeledCorpus:
    """Pooled labeled-text stand-in: train+dev sentences of both domains."""
    return text_corpus(
        list(target_dataset.train) + list(target_dataset.dev)
        + list(source_dataset.train) + list(source_dataset.dev)
    )


@pytest.fixture(scope="session")
def lm_heldout(target_dataset, source_dataset, lm_corpus) -> UnlabeledCorpus:
    pool = text_corpus(list(target_dataset.test) + list(source_dataset.test))
    train_set = set(lm_corpus.sentences)
    sents = tuple(s for s in pool.sentences if s not in train_set)
    return UnlabeledCorpus(sents, sum(len(s) for s in sents))


@pytest.fixture(scope="session")
def toy_lm(lm_corpus, lm_heldout):
    """Single-layer bi-LM pretrained on the toy pool (the ELMoL LM)."""
    vocab = build_vocab(lm_corpus)
    config = LMConfig.single_layer(vocab, epochs=8, batch_size=16)
    return train_bilm(lm_corpus, config, lm_heldout, seed=5)


@pytest.fixture(scope="session")
def toy_lm_2layer(lm_corpus, lm_heldout):
    """Tiny two-layer bi-LM for the contextual-embedding condition."""
    vocab = build_vocab(lm_corpus)
    config = LMConfig(
        vocab=vocab, layers=2, hidden_size=16, word_dim=8, char_dim=8,
        char_cnn_spec=((1, 4), (2, 4)), epochs=3, batch_size=16,
    )
    return train_bilm(lm_corpus, config, lm_heldout, seed=6)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
