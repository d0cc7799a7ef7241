"""Heuristic English detector for short code comments."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from typing import Protocol

import regex

WORD_RE = regex.compile(r"\p{L}+")
DEFAULT_THRESHOLD = 0.3


class LanguageClassifier(Protocol):
    def is_english(self, text: str) -> bool: ...


@lru_cache(maxsize=1)
def english_words() -> frozenset[str]:
    text = resources.files("nlgp.data").joinpath("english_words.txt").read_text("utf-8")
    return frozenset(w for w in text.split() if w)


class WordListClassifier:
    """Classify text as English when enough of its words are common English words.

    Text without alphabetic words (numbers, punctuation, code fragments such as
    ``x = 1``) counts as English so it is never dropped.
    """

    def __init__(self, words: frozenset[str] | None = None, threshold: float = DEFAULT_THRESHOLD):
        self.words = english_words() if words is None else words
        self.threshold = threshold

    def english_fraction(self, text: str) -> float | None:
        found = [w.lower() for w in WORD_RE.findall(text)]
        if not found:
            return None
        return sum(w in self.words for w in found) / len(found)

    def is_english(self, text: str) -> bool:
        frac = self.english_fraction(text)
        return frac is None or frac >= self.threshold


_default: WordListClassifier | None = None


def default_classifier() -> WordListClassifier:
    global _default
    if _default is None:
        _default = WordListClassifier()
    return _default
