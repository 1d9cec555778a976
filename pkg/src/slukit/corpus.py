"""Labeled SLU datasets, unlabeled text corpora, vocabularies and label spaces.

File formats:
  * CoNLL-TSV: a ``# intent: <label>`` header line, then one ``<token>\\t<tag>``
    line per token, utterances separated by blank lines, UTF-8.
  * JSON: an array of objects ``{"tokens": [...], "tags": [...], "intent": "..."}``
    per split file.
  * Unlabeled text: UTF-8 plain text, one sentence per line.
"""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

PAD = "<pad>"
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"
SPECIALS = (PAD, UNK, BOS, EOS)

_TAG_RE = re.compile(r"^(O|[BI]-\S+)$")


class CorpusError(Exception):
    """Malformed input file or violated data contract."""


class FormatError(CorpusError):
    """Parse failure; carries the offending file and line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class ValidationError(CorpusError):
    """Tag or intent outside the declared label space."""


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization with lowercasing."""
    return text.lower().split()


# ---------------------------------------------------------------------------
# BIO handling


def is_valid_bio(tags: Sequence[str]) -> bool:
    """True iff every tag is well-formed and no I-X is orphaned."""
    prev = "O"
    for tag in tags:
        if not _TAG_RE.match(tag):
            return False
        if tag.startswith("I-"):
            etype = tag[2:]
            if prev not in (f"B-{etype}", f"I-{etype}"):
                return False
        prev = tag
    return True


def repair_bio(tags: Sequence[str]) -> tuple[list[str], int]:
    """Convert orphan ``I-X`` tags to ``B-X``; returns (tags, repair count).

    An I-X is orphaned when it starts the sequence, follows O, or follows a
    tag of a different entity type. Malformed tag strings are rejected.
    """
    repaired: list[str] = []
    count = 0
    prev = "O"
    for tag in tags:
        if not _TAG_RE.match(tag):
            raise ValidationError(f"malformed BIO tag {tag!r}")
        if tag.startswith("I-"):
            etype = tag[2:]
            if prev not in (f"B-{etype}", f"I-{etype}"):
                tag = f"B-{etype}"
                count += 1
        repaired.append(tag)
        prev = tag
    return repaired, count


def entity_type_of(tag: str) -> str | None:
    return tag[2:] if tag != "O" else None


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class Utterance:
    tokens: tuple[str, ...]
    bio_tags: tuple[str, ...]
    intent: str

    def __post_init__(self):
        if len(self.tokens) != len(self.bio_tags):
            raise ValidationError(
                f"{len(self.tokens)} tokens but {len(self.bio_tags)} tags"
            )
        if not self.tokens:
            raise ValidationError("empty utterance")


@dataclass(frozen=True)
class LabelSpace:
    """Deterministically ordered intent and entity-type inventories."""

    intents: tuple[str, ...]
    entity_types: tuple[str, ...]

    def __post_init__(self):
        if not self.intents:
            raise ValidationError("label space needs at least one intent")
        object.__setattr__(self, "intents", tuple(sorted(set(self.intents))))
        object.__setattr__(self, "entity_types", tuple(sorted(set(self.entity_types))))

    @property
    def bio_tags(self) -> tuple[str, ...]:
        """All BIO tags: O first, then B-X/I-X per sorted type."""
        tags = ["O"]
        for etype in self.entity_types:
            tags.append(f"B-{etype}")
            tags.append(f"I-{etype}")
        return tuple(tags)

    def tag_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.bio_tags)}

    def intent_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.intents)}

    @classmethod
    def from_utterances(cls, utterances: Iterable[Utterance]) -> "LabelSpace":
        intents, etypes = set(), set()
        for utt in utterances:
            intents.add(utt.intent)
            for tag in utt.bio_tags:
                etype = entity_type_of(tag)
                if etype:
                    etypes.add(etype)
        return cls(tuple(intents), tuple(etypes))


@dataclass(frozen=True)
class Dataset:
    name: str
    train: tuple[Utterance, ...]
    dev: tuple[Utterance, ...]
    test: tuple[Utterance, ...]
    label_space: LabelSpace
    repair_count: int = 0

    def __post_init__(self):
        intents = set(self.label_space.intents)
        etypes = set(self.label_space.entity_types)
        for utt in self.all_utterances():
            if utt.intent not in intents:
                raise ValidationError(f"intent {utt.intent!r} not in label space")
            for tag in utt.bio_tags:
                etype = entity_type_of(tag)
                if etype is not None and etype not in etypes:
                    raise ValidationError(f"entity type {etype!r} not in label space")

    def all_utterances(self) -> tuple[Utterance, ...]:
        return self.train + self.dev + self.test

    def split(self, name: str) -> tuple[Utterance, ...]:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True)
class UnlabeledCorpus:
    sentences: tuple[tuple[str, ...], ...]
    token_count: int

    def __post_init__(self):
        if self.token_count != sum(len(s) for s in self.sentences):
            raise ValidationError("token_count inconsistent with sentences")


@dataclass
class Vocabulary:
    """Word/index bijection with reserved special symbols.

    Indices 0..3 are <pad>, <unk>, <s>, </s>; lookups of unseen words map to
    the unknown index. Words are matched lowercase.
    """

    words: list[str] = field(default_factory=lambda: list(SPECIALS))
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.words[: len(SPECIALS)]) != SPECIALS:
            self.words = list(SPECIALS) + [w for w in self.words if w not in SPECIALS]
        self._index = {w: i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise ValidationError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._index

    @property
    def pad_index(self) -> int:
        return self._index[PAD]

    @property
    def unk_index(self) -> int:
        return self._index[UNK]

    @property
    def bos_index(self) -> int:
        return self._index[BOS]

    @property
    def eos_index(self) -> int:
        return self._index[EOS]

    def index(self, word: str) -> int:
        return self._index.get(word.lower(), self._index[UNK])

    def word(self, index: int) -> str:
        return self.words[index]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    def non_special_size(self) -> int:
        return len(self.words) - len(SPECIALS)


# ---------------------------------------------------------------------------
# Loading


def _parse_conll_blocks(path: Path) -> list[tuple[list[str], list[str], str]]:
    blocks = []
    tokens: list[str] = []
    tags: list[str] = []
    intent: str | None = None

    def flush(lineno):
        nonlocal tokens, tags, intent
        if not tokens and intent is None:
            return
        if not tokens:
            raise FormatError(path, lineno, "utterance with intent but no tokens")
        if intent is None:
            raise FormatError(path, lineno, "utterance without '# intent:' header")
        blocks.append((tokens, tags, intent))
        tokens, tags, intent = [], [], None

    with open(path, encoding="utf-8") as fh:
        lineno = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            if line.startswith("#"):
                m = re.match(r"#\s*intent:\s*(\S+)\s*$", line)
                if not m:
                    raise FormatError(path, lineno, f"bad header line {line!r}")
                if intent is not None:
                    raise FormatError(path, lineno, "duplicate intent header")
                intent = m.group(1)
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(
                    path, lineno, f"expected '<token>\\t<tag>', got {line!r}"
                )
            tokens.append(parts[0])
            tags.append(parts[1])
        flush(lineno + 1)
    return blocks


def _parse_json_split(path: Path) -> list[tuple[list[str], list[str], str]]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, exc.msg) from exc
    if not isinstance(data, list):
        raise FormatError(path, 1, "expected a JSON array of utterance objects")
    blocks = []
    for i, obj in enumerate(data):
        try:
            blocks.append((list(obj["tokens"]), list(obj["tags"]), str(obj["intent"])))
        except (KeyError, TypeError) as exc:
            raise FormatError(path, 1, f"entry {i}: missing field {exc}") from exc
    return blocks


def _load_split(path: Path, fmt: str) -> tuple[list[Utterance], int]:
    if fmt == "conll-tsv":
        blocks = _parse_conll_blocks(path)
    elif fmt == "json":
        blocks = _parse_json_split(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    utterances = []
    repairs = 0
    for tokens, tags, intent in blocks:
        if len(tokens) != len(tags):
            raise FormatError(path, 0, "token/tag length mismatch")
        fixed, n = repair_bio(tags)
        repairs += n
        utterances.append(Utterance(tuple(tokens), tuple(fixed), intent))
    return utterances, repairs


_SPLIT_EXT = {"conll-tsv": ".tsv", "json": ".json"}


def load_labeled(
    path: str | Path,
    fmt: str = "conll-tsv",
    label_space: LabelSpace | None = None,
    name: str | None = None,
) -> Dataset:
    """Load a labeled dataset from a directory of split files or a single file.

    A directory must contain ``train``/``dev``/``test`` files with the
    format's extension (missing dev/test are treated as empty). A single file
    becomes the train split. Malformed BIO is repaired (orphan I-X -> B-X)
    and the repair total is recorded on the returned Dataset. If a
    ``label_space`` is supplied, out-of-space labels raise ValidationError;
    otherwise the space is built from the data.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"no such path: {path}")
    splits: dict[str, list[Utterance]] = {"train": [], "dev": [], "test": []}
    repairs = 0
    if path.is_dir():
        ext = _SPLIT_EXT[fmt] if fmt in _SPLIT_EXT else ""
        found = False
        for split in splits:
            fp = path / f"{split}{ext}"
            if fp.exists():
                splits[split], n = _load_split(fp, fmt)
                repairs += n
                found = True
        if not found:
            raise CorpusError(f"no train/dev/test {ext} files under {path}")
    else:
        splits["train"], repairs = _load_split(path, fmt)
    if not any(splits.values()):
        raise CorpusError(f"{path} contains no utterances")

    utterances = [u for us in splits.values() for u in us]
    space = label_space or LabelSpace.from_utterances(utterances)
    return Dataset(
        name=name or path.stem if path.is_file() else (name or path.name),
        train=tuple(splits["train"]),
        dev=tuple(splits["dev"]),
        test=tuple(splits["test"]),
        label_space=space,
        repair_count=repairs,
    )


def load_unlabeled(paths: Sequence[str | Path]) -> UnlabeledCorpus:
    """Pool one-sentence-per-line text files, deduplicating whole sentences.

    Sentences are tokenized (lowercased whitespace split); duplicates are
    detected on the tokenized form, first occurrence wins.
    """
    seen: dict[tuple[str, ...], None] = {}
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise CorpusError(f"no such file: {p}")
        with open(p, encoding="utf-8") as fh:
            for line in fh:
                toks = tuple(tokenize(line))
                if toks and toks not in seen:
                    seen[toks] = None
    if not seen:
        raise CorpusError("unlabeled pool is empty")
    sentences = tuple(seen.keys())
    return UnlabeledCorpus(sentences, sum(len(s) for s in sentences))


def corpus_from_dataset_text(dataset: Dataset, splits: Sequence[str] = ("train",)) -> UnlabeledCorpus:
    """Strip labels from dataset splits, yielding a deduplicated text corpus."""
    seen: dict[tuple[str, ...], None] = {}
    for split in splits:
        for utt in dataset.split(split):
            toks = tuple(tokenize(" ".join(utt.tokens)))
            if toks and toks not in seen:
                seen[toks] = None
    if not seen:
        raise CorpusError("dataset has no text in the requested splits")
    sentences = tuple(seen.keys())
    return UnlabeledCorpus(sentences, sum(len(s) for s in sentences))


def merge_corpora(*corpora: UnlabeledCorpus) -> UnlabeledCorpus:
    seen: dict[tuple[str, ...], None] = {}
    for corpus in corpora:
        for s in corpus.sentences:
            if s not in seen:
                seen[s] = None
    sentences = tuple(seen.keys())
    return UnlabeledCorpus(sentences, sum(len(s) for s in sentences))


# ---------------------------------------------------------------------------
# Vocabulary and sampling


def build_vocab(source: Dataset | UnlabeledCorpus, min_count: int = 1) -> Vocabulary:
    """Vocabulary of words occurring >= min_count times, plus specials.

    Ordering is frequency descending, ties broken lexicographically, so two
    builds from the same source are identical. Dataset sources count the
    train split only.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    if isinstance(source, Dataset):
        for utt in source.train:
            counts.update(tokenize(" ".join(utt.tokens)))
    elif isinstance(source, UnlabeledCorpus):
        for sent in source.sentences:
            counts.update(sent)
    else:
        raise TypeError(f"cannot build vocabulary from {type(source).__name__}")
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    return Vocabulary(list(SPECIALS) + kept)


def sample_low_resource(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Uniform sample without replacement from train; dev/test untouched."""
    if size > len(dataset.train):
        raise ValueError(
            f"requested {size} samples but train split has {len(dataset.train)}"
        )
    rng = random.Random(seed)
    indices = sorted(rng.sample(range(len(dataset.train)), size))
    return replace(
        dataset,
        name=f"{dataset.name}-n{size}-s{seed}",
        train=tuple(dataset.train[i] for i in indices),
    )
