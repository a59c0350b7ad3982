"""Synthetic classification tasks over a shared ~200-word vocabulary.

keyword: label 1 iff group-A keywords outnumber group-B keywords.
xor:     label = (any group-X word) XOR (any group-Y word).

Both generators are pure functions of their seed; splits never share a
sentence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import Vocabulary

KW_POS = [f"kpos{i}" for i in range(12)]
KW_NEG = [f"kneg{i}" for i in range(12)]
XOR_X = [f"xa{i}" for i in range(8)]
XOR_Y = [f"xb{i}" for i in range(8)]
DISTRACTORS = [f"w{i}" for i in range(156)]

MIN_WORDS, MAX_WORDS = 6, 12
# xor sentences are shorter and each present group repeats, so the two
# presence signals survive mean-like pooling in a frozen encoder
XOR_MIN_WORDS, XOR_MAX_WORDS = 4, 8
XOR_REPEATS = (2, 3)


DISTRACTOR_CLUSTERS = 12


def build_vocab() -> Vocabulary:
    """Shared vocabulary; each keyword group is one lexical cluster and the
    distractors are split into ``DISTRACTOR_CLUSTERS`` clusters."""
    words = KW_POS + KW_NEG + XOR_X + XOR_Y + DISTRACTORS
    groups = ([0] * len(KW_POS) + [1] * len(KW_NEG) + [2] * len(XOR_X) + [3] * len(XOR_Y)
              + [4 + i % DISTRACTOR_CLUSTERS for i in range(len(DISTRACTORS))])
    return Vocabulary.from_words(words, groups)


VOCAB = build_vocab()


def tokenize(text: str, vocab: Vocabulary = VOCAB) -> list[int]:
    return vocab.tokenize(text)


@dataclass(frozen=True)
class Example:
    ids: tuple[int, ...]
    label: int
    text: str = ""

    def __post_init__(self):
        if len(self.ids) < 1:
            raise ValueError("empty example")


@dataclass
class DatasetSplit:
    name: str
    num_classes: int
    seed: int
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    vocab: Vocabulary = field(default_factory=lambda: VOCAB)

    def split(self, which: str) -> list[Example]:
        return {"train": self.train, "dev": self.dev, "test": self.test}[which]


def collate(examples, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token ids into a (B, n) array; returns (ids, labels)."""
    n = max(len(e.ids) for e in examples)
    ids = np.full((len(examples), n), pad_id, dtype=np.int64)
    for i, e in enumerate(examples):
        ids[i, : len(e.ids)] = e.ids
    return ids, np.array([e.label for e in examples], dtype=np.int64)


def _fill(rng, keywords: list[str], lo: int | None = None, hi: int | None = None) -> list[str]:
    lo = MIN_WORDS if lo is None else lo
    hi = MAX_WORDS if hi is None else hi
    length = int(rng.integers(max(lo, len(keywords)), max(hi, len(keywords)) + 1))
    words = [DISTRACTORS[j] for j in rng.integers(0, len(DISTRACTORS), length - len(keywords))]
    for kw in keywords:
        words.insert(int(rng.integers(0, len(words) + 1)), kw)
    return words


def keyword_sentence(rng, label: int) -> list[str]:
    major = int(rng.integers(1, 4))
    minor = int(rng.integers(0, major))
    pos, neg = (major, minor) if label == 1 else (minor, major)
    kws = [KW_POS[j] for j in rng.integers(0, len(KW_POS), pos)]
    kws += [KW_NEG[j] for j in rng.integers(0, len(KW_NEG), neg)]
    return _fill(rng, kws)


def keyword_label(words) -> int:
    pos = sum(w in KW_POS for w in words)
    neg = sum(w in KW_NEG for w in words)
    return int(pos > neg)


def swap_keyword_groups(words) -> list[str]:
    """Exchange every kposN with knegN and vice versa."""
    out = []
    for w in words:
        if w in KW_POS:
            out.append(KW_NEG[KW_POS.index(w)])
        elif w in KW_NEG:
            out.append(KW_POS[KW_NEG.index(w)])
        else:
            out.append(w)
    return out


def xor_sentence(rng, pattern: tuple[int, int]) -> list[str]:
    kws = []
    for present, group in zip(pattern, (XOR_X, XOR_Y)):
        if present:
            k = int(rng.integers(XOR_REPEATS[0], XOR_REPEATS[1] + 1))
            kws += [group[j] for j in rng.integers(0, len(group), k)]
    return _fill(rng, kws, XOR_MIN_WORDS, XOR_MAX_WORDS)


def xor_label(words) -> int:
    return int(any(w in XOR_X for w in words)) ^ int(any(w in XOR_Y for w in words))


def _generate(name, seed, sizes, make, label_of, num_classes, n_cycle) -> DatasetSplit:
    rng = np.random.default_rng(seed)
    seen: set[tuple[str, ...]] = set()
    splits = []
    for size in sizes:
        if size <= 0:
            raise ValueError("split sizes must be positive")
        # balanced by cycling through the label patterns, then shuffled
        items = []
        k = 0
        while len(items) < size:
            words = make(rng, k % n_cycle)
            key = tuple(words)
            if key in seen:
                continue
            seen.add(key)
            text = " ".join(words)
            items.append(Example(tuple(VOCAB.tokenize(text)), label_of(words), text))
            k += 1
        order = rng.permutation(len(items))
        splits.append([items[i] for i in order])
    return DatasetSplit(name, num_classes, seed, *splits)


def gen_keyword_task(seed: int, sizes=(32, 32, 200)) -> DatasetSplit:
    return _generate("keyword", seed, sizes, keyword_sentence, keyword_label, 2, 2)


def gen_xor_task(seed: int, sizes=(32, 32, 200)) -> DatasetSplit:
    patterns = [(0, 0), (1, 0), (0, 1), (1, 1)]
    return _generate("xor", seed, sizes, lambda r, k: xor_sentence(r, patterns[k]),
                     xor_label, 2, 4)


TASKS = {"keyword": gen_keyword_task, "xor": gen_xor_task}


def make_task(name: str, seed: int, sizes) -> DatasetSplit:
    try:
        return TASKS[name](seed, sizes)
    except KeyError:
        raise ValueError(f"unknown task {name!r}") from None
