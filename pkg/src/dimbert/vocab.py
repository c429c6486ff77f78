"""Closed whitespace vocabulary with reserved special-token ids.

Ids 0-3 are always ``[CLS] [SEP] [MASK] [END]``; word ids follow in file order.
The on-disk format is one token per line, line number = id.
"""

from __future__ import annotations

from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import VocabularyError


class Special(IntEnum):
    CLS = 0
    SEP = 1
    MASK = 2
    END = 3


SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[MASK]", "[END]")


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        words = list(words)
        clash = set(words) & set(SPECIAL_TOKENS)
        if clash:
            raise VocabularyError(f"special tokens cannot appear as words: {sorted(clash)}")
        if len(set(words)) != len(words):
            raise VocabularyError("duplicate words in vocabulary")
        self.tokens: list[str] = list(SPECIAL_TOKENS) + words
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def n_special(self) -> int:
        return len(SPECIAL_TOKENS)

    @property
    def words(self) -> list[str]:
        return self.tokens[self.n_special:]

    @property
    def word_ids(self) -> range:
        """Ids of non-special tokens (the random-replacement pool)."""
        return range(self.n_special, len(self.tokens))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def is_special(self, token_id: int) -> bool:
        return token_id < self.n_special

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError(f"vocabulary file must start with {SPECIAL_TOKENS}")
        return cls(lines[len(SPECIAL_TOKENS):])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(tuple(self.tokens))
