"""Byte-level byte-pair-encoding tokenizer with atomic special tokens.

Token strings use the usual printable byte-to-unicode mapping so merges and
vocabulary files are interchangeable with the widely used reference format
(``vocab.bpe`` / ``encoder.json``).
"""

from __future__ import annotations

import heapq
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import regex

from nlgp import special

PRETOKENIZE = regex.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")
BASE_SIZE = 256


class EmptyCorpus(ValueError):
    pass


class UnknownTokenId(KeyError):
    pass


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


@lru_cache(maxsize=1)
def unicode_to_bytes() -> dict[str, int]:
    return {c: b for b, c in bytes_to_unicode().items()}


def token_bytes(token: str) -> bytes:
    table = unicode_to_bytes()
    return bytes(table[c] for c in token)


@dataclass
class Vocab:
    token_to_id: dict[str, int]
    special_tokens: frozenset[str] = frozenset()
    id_to_token: dict[int, str] = field(init=False, repr=False)

    def __post_init__(self):
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        if len(self.id_to_token) != len(self.token_to_id):
            raise ValueError("vocabulary ids are not unique")
        missing = [t for t in self.special_tokens if t not in self.token_to_id]
        if missing:
            raise ValueError(f"special tokens missing from vocabulary: {missing}")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __contains__(self, token_id: int) -> bool:
        return token_id in self.id_to_token


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    vocab: Vocab = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return TokenSeq(self.ids[idx], self.vocab)
        return self.ids[idx]

    def __add__(self, other: "TokenSeq | Sequence[int]") -> "TokenSeq":
        return TokenSeq(self.ids + tuple(other), self.vocab)

    @property
    def tokens(self) -> list[str]:
        return [self.vocab.id_to_token[i] for i in self.ids]


class Tokenizer:
    def __init__(self, vocab: Vocab, merges: Sequence[tuple[str, str]]):
        self.vocab = vocab
        self.merges = list(merges)
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        if len(self.ranks) != len(self.merges):
            raise ValueError("duplicate merge pairs")
        specials = sorted(vocab.special_tokens, key=len, reverse=True)
        self._special_re = regex.compile("(" + "|".join(map(regex.escape, specials)) + ")") if specials else None
        self._cache: dict[str, tuple[str, ...]] = {}

    # -- encoding ---------------------------------------------------------

    def _bpe(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        parts = list(word)
        while len(parts) > 1:
            best = None
            best_rank = None
            for pair in zip(parts, parts[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == best[0] and parts[i + 1] == best[1]:
                    merged.append(best[0] + best[1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        out = tuple(parts)
        self._cache[word] = out
        return out

    def _segments(self, text: str) -> Iterable[tuple[str, bool]]:
        if self._special_re is None:
            yield text, False
            return
        for i, seg in enumerate(self._special_re.split(text)):
            if seg:
                yield seg, i % 2 == 1

    def encode(self, text: str | bytes) -> TokenSeq:
        """Encode text (or raw bytes) into token ids."""
        if isinstance(text, bytes):
            text = text.decode("utf-8", "surrogateescape")
        byte_map = bytes_to_unicode()
        t2i = self.vocab.token_to_id
        ids: list[int] = []
        for seg, is_special in self._segments(text):
            if is_special:
                ids.append(t2i[seg])
                continue
            for piece in PRETOKENIZE.findall(seg):
                raw = piece.encode("utf-8", "surrogateescape")
                word = "".join(byte_map[b] for b in raw)
                ids.extend(t2i[tok] for tok in self._bpe(word))
        return TokenSeq(tuple(ids), self.vocab)

    # -- decoding ---------------------------------------------------------

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        out = bytearray()
        i2t = self.vocab.id_to_token
        for i in ids:
            tok = i2t.get(i)
            if tok is None:
                raise UnknownTokenId(i)
            if tok in self.vocab.special_tokens:
                out += tok.encode("utf-8")
            else:
                out += token_bytes(tok)
        return bytes(out)

    def decode(self, ids: Iterable[int], errors: str = "surrogateescape") -> str:
        return self.decode_bytes(ids).decode("utf-8", errors)

    def token_id(self, token: str) -> int:
        return self.vocab.token_to_id[token]

    # -- persistence ------------------------------------------------------

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ordered = sorted(self.vocab.token_to_id.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise ValueError("vocabulary ids must be contiguous to save as a line file")
        (out_dir / "vocab.txt").write_text("".join(t + "\n" for t, _ in ordered), "utf-8")
        (out_dir / "merges.txt").write_text("".join(f"{a} {b}\n" for a, b in self.merges), "utf-8")

    @classmethod
    def from_files(
        cls, vocab_path: str | Path, merges_path: str | Path, specials: Iterable[str] = special.ALL
    ) -> "Tokenizer":
        """Load a vocabulary (line file or JSON token->id map) and a merges file.

        Special tokens absent from the vocabulary are appended with fresh ids.
        """
        vocab_path = Path(vocab_path)
        text = vocab_path.read_text("utf-8")
        if vocab_path.suffix == ".json":
            token_to_id = {t: int(i) for t, i in json.loads(text).items()}
        else:
            token_to_id = {t: i for i, t in enumerate(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))}
        specials = list(specials)
        next_id = max(token_to_id.values(), default=-1) + 1
        for tok in specials:
            if tok not in token_to_id:
                token_to_id[tok] = next_id
                next_id += 1
        merges = []
        for line in Path(merges_path).read_text("utf-8").splitlines():
            if not line or line.startswith("#version"):
                continue
            left, right = line.split(" ")
            merges.append((left, right))
        return cls(Vocab(token_to_id, frozenset(specials)), merges)

    @classmethod
    def from_dir(cls, path: str | Path, specials: Iterable[str] = special.ALL) -> "Tokenizer":
        path = Path(path)
        vocab = path / "vocab.txt"
        if not vocab.exists():
            vocab = path / "encoder.json"
        merges = path / "merges.txt"
        if not merges.exists():
            merges = path / "vocab.bpe"
        return cls.from_files(vocab, merges, specials)

    def to_dict(self) -> dict:
        return {
            "vocab": sorted(self.vocab.token_to_id.items(), key=lambda kv: kv[1]),
            "merges": self.merges,
            "specials": sorted(self.vocab.special_tokens),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tokenizer":
        vocab = Vocab({t: i for t, i in data["vocab"]}, frozenset(data["specials"]))
        return cls(vocab, [tuple(m) for m in data["merges"]])


def train_bpe(corpus: str | bytes, target_vocab_size: int, specials: Iterable[str] = special.ALL) -> Tokenizer:
    """Learn merges greedily by pair frequency.

    Special tokens are cut out of the corpus before counting, so no merge can
    span one. Ties go to the lexicographically smallest ``(left, right)``
    byte pair, and pairs seen only once are never merged.
    """
    specials = list(dict.fromkeys(specials))
    if target_vocab_size <= BASE_SIZE + len(specials):
        raise ValueError(f"target_vocab_size must exceed {BASE_SIZE + len(specials)}")
    if isinstance(corpus, bytes):
        corpus = corpus.decode("utf-8", "surrogateescape")
    if specials:
        pattern = regex.compile("|".join(map(regex.escape, sorted(specials, key=len, reverse=True))))
        chunks = pattern.split(corpus)
    else:
        chunks = [corpus]
    byte_map = bytes_to_unicode()
    word_freq: Counter[tuple[str, ...]] = Counter()
    for chunk in chunks:
        for piece in PRETOKENIZE.findall(chunk):
            raw = piece.encode("utf-8", "surrogateescape")
            word_freq[tuple(byte_map[b] for b in raw)] += 1
    if not word_freq:
        raise EmptyCorpus("corpus contains no trainable text")

    words = [list(w) for w in word_freq]
    freqs = list(word_freq.values())
    pair_count: dict[tuple[str, str], int] = defaultdict(int)
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, w in enumerate(words):
        for pair in zip(w, w[1:]):
            pair_count[pair] += freqs[idx]
            pair_words[pair].add(idx)

    def entry(pair):
        return (-pair_count[pair], token_bytes(pair[0]), token_bytes(pair[1]), pair)

    heap = [entry(p) for p in pair_count]
    heapq.heapify(heap)
    merges: list[tuple[str, str]] = []
    n_merges = target_vocab_size - BASE_SIZE - len(specials)
    while heap and len(merges) < n_merges:
        neg, _, _, pair = heapq.heappop(heap)
        if -neg != pair_count.get(pair, 0):
            continue  # stale entry
        if -neg < 2:
            break
        merges.append(pair)
        merged_tok = pair[0] + pair[1]
        touched: set[tuple[str, str]] = set()
        for idx in sorted(pair_words.pop(pair, ())):
            w = words[idx]
            f = freqs[idx]
            for p in zip(w, w[1:]):
                pair_count[p] -= f
                touched.add(p)
            new = []
            i = 0
            while i < len(w):
                if i < len(w) - 1 and w[i] == pair[0] and w[i + 1] == pair[1]:
                    new.append(merged_tok)
                    i += 2
                else:
                    new.append(w[i])
                    i += 1
            words[idx] = new
            for p in zip(new, new[1:]):
                pair_count[p] += f
                pair_words[p].add(idx)
                touched.add(p)
        pair_count.pop(pair, None)
        for p in touched:
            if p == pair:
                continue
            c = pair_count.get(p, 0)
            if c <= 0:
                pair_count.pop(p, None)
                pair_words.pop(p, None)
            else:
                heapq.heappush(heap, entry(p))

    token_to_id = {byte_map[b]: b for b in range(BASE_SIZE)}
    for a, b in merges:
        token_to_id.setdefault(a + b, len(token_to_id))
    for tok in specials:
        token_to_id[tok] = len(token_to_id)
    return Tokenizer(Vocab(token_to_id, frozenset(specials)), merges)
