from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

PAD, MASK, CLS, UNK = "[PAD]", "[MASK]", "[CLS]", "[UNK]"
RESERVED = (PAD, MASK, CLS, UNK)


@dataclass
class Vocabulary:
    """Token <-> id map with the four reserved tokens at ids 0..3."""

    tokens: list[str]
    # lexical cluster per token; clustered words get correlated embeddings
    groups: list[int] | None = None
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            self.tokens = list(RESERVED) + [t for t in self.tokens if t not in RESERVED]
        if self.groups is not None and len(self.groups) != len(self.tokens):
            raise ValueError("groups must assign one cluster per token")
        self._index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._index:
                raise ValueError(f"duplicate token {tok!r}")
            self._index[tok] = i

    @classmethod
    def from_words(cls, words: Iterable[str], groups: Iterable[int] | None = None) -> "Vocabulary":
        """Reserved tokens first, then ``words`` deduplicated in order.

        Reserved tokens get clusters 0..3; ``groups`` (aligned with ``words``)
        are shifted past them.
        """
        words = [w.lower() for w in words]
        grp = list(groups) if groups is not None else None
        seen: dict[str, int] = {}
        for i, w in enumerate(words):
            if w not in seen:
                seen[w] = grp[i] + len(RESERVED) if grp is not None else -1
        tokens = list(RESERVED) + list(seen)
        if grp is None:
            return cls(tokens)
        return cls(tokens, list(range(len(RESERVED))) + list(seen.values()))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def mask_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def reserved_ids(self) -> frozenset[int]:
        return frozenset(range(len(RESERVED)))

    def id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def tokenize(self, text: str) -> list[int]:
        """Lowercase, split on whitespace, map to ids and prepend [CLS]."""
        return [self.cls_id] + [self.id(w) for w in text.lower().split()]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i not in (self.cls_id, self.pad_id))
