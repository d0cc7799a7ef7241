"""Prompt assembly, constrained beam search, and next-token backends."""

from __future__ import annotations

import gzip
import json
import logging
import math
import subprocess
import threading
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from nlgp import special
from nlgp.bpe import Tokenizer, TokenSeq
from nlgp.corpus import encode_indentation, model_text_to_source, source_to_model_text
from nlgp.records import BenchmarkCase, PredictionRecord

log = logging.getLogger(__name__)

NEG_INF = float("-inf")
BACKOFF = 0.4
PROTOCOL_VERSION = 1


class IntentEmpty(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


class BackendFailure(RuntimeError):
    def __init__(self, message: str, prefix: Sequence[int] = ()):
        super().__init__(f"{message} (prefix length {len(prefix)}, tail {list(prefix[-8:])})")
        self.prefix = list(prefix)


class Backend(Protocol):
    backend_id: str
    concurrent_safe: bool

    def next_token_logprobs(self, prefix: Sequence[int]) -> Mapping[int, float]: ...


@dataclass(frozen=True)
class DecoderConfig:
    beam_width: int = 3
    min_tokens: int = 10
    max_tokens: int = 150
    stop_token: int = -1

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not 0 < self.min_tokens <= self.max_tokens:
            raise ValueError("need 0 < min_tokens <= max_tokens")


@dataclass(frozen=True)
class PromptSpec:
    context_tokens: TokenSeq
    intent_tokens: TokenSeq
    marker: int
    max_context: int = 700

    @property
    def ids(self) -> tuple[int, ...]:
        return self.context_tokens.ids + self.intent_tokens.ids + (self.marker,)

    def __len__(self) -> int:
        return len(self.context_tokens) + len(self.intent_tokens) + 1


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]
    score: float
    stopped: bool = False


# --- prompts --------------------------------------------------------------------


def intent_line(intent: str) -> str:
    if intent.lstrip().startswith("#"):
        return intent.rstrip("\n")
    return "# " + intent.strip()


def assemble_prompt(context: str, intent: str, tok: Tokenizer, max_context: int = 700) -> PromptSpec:
    """Context (most recent tokens kept) + ``# intent`` + end-of-comment marker."""
    if not intent.strip().lstrip("#").strip():
        raise IntentEmpty("intent must be non-empty")
    if max_context < 2:
        raise ValueError("max_context must be at least 2")
    marker = tok.token_id(special.END_OF_COMMENT)
    intent_ids = tok.encode(encode_indentation(intent_line(intent)))
    if len(intent_ids) > max_context - 1:
        intent_ids = intent_ids[len(intent_ids) - (max_context - 1):]
    ctx_text = source_to_model_text(context) if context.strip() else ""
    ctx_ids = tok.encode(ctx_text)
    budget = max_context - 1 - len(intent_ids)
    ctx_ids = ctx_ids[len(ctx_ids) - budget:] if budget > 0 else ctx_ids[:0]
    return PromptSpec(ctx_ids, intent_ids, marker, max_context)


# --- decoding -------------------------------------------------------------------


def _logsumexp(values: np.ndarray) -> float:
    m = values.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.exp(values - m).sum()))


def _dense(lp, vocab_size: int | None) -> np.ndarray:
    if isinstance(lp, np.ndarray):
        return lp.astype(float, copy=True)
    size = max(max(lp) + 1, vocab_size or 0)
    out = np.full(size, NEG_INF)
    for t, v in lp.items():
        out[t] = v
    return out


def step_logprobs(backend: Backend, prefix: Sequence[int], n_generated: int, cfg: DecoderConfig,
                  vocab_size: int | None = None) -> np.ndarray:
    """Backend log-probs for the next position, stop token masked before ``min_tokens``.

    Masked mass is renormalized over the remaining tokens; if nothing
    remains, the non-stop tokens become uniform.
    """
    try:
        fast = getattr(backend, "next_token_logprob_array", None)
        lp = fast(prefix) if fast is not None else backend.next_token_logprobs(prefix)
    except BackendFailure:
        raise
    except Exception as exc:
        raise BackendFailure(f"backend error: {exc}", prefix) from exc
    lp = _dense(lp, vocab_size)
    if n_generated < cfg.min_tokens and 0 <= cfg.stop_token < len(lp):
        lp[cfg.stop_token] = NEG_INF
        z = _logsumexp(lp)
        if z == NEG_INF:
            lp[:] = -math.log(len(lp) - 1)
            lp[cfg.stop_token] = NEG_INF
        else:
            lp -= z
    return lp


def _top(lp: np.ndarray, k: int) -> list[tuple[int, float]]:
    k = min(k, len(lp))
    idx = np.argpartition(-lp, k - 1)[:k] if k < len(lp) else np.arange(len(lp))
    # widen to include ties at the cut so ordering is by (score desc, id asc)
    cut = lp[idx].min()
    idx = np.flatnonzero(lp >= cut)
    order = sorted(idx.tolist(), key=lambda t: (-lp[t], t))[:k]
    return [(t, float(lp[t])) for t in order if lp[t] > NEG_INF]


def _beam_pass(base: tuple[int, ...], backend: Backend, cfg: DecoderConfig, width: int,
               vocab_size: int | None) -> tuple[list[Hypothesis], bool]:
    """One pruned pass; also reports whether any candidate was pruned."""
    live = [Hypothesis((), 0.0)]
    pruned = False
    finished: list[Hypothesis] = []
    finished_best = NEG_INF
    while live:
        if len(finished) >= width and finished_best >= live[0].score:
            break
        cands = []
        for h in live:
            lp = step_logprobs(backend, base + h.ids, len(h.ids), cfg, vocab_size)
            top = _top(lp, width + 1)
            pruned = pruned or len(top) < int(np.isfinite(lp).sum())
            for t, v in top:
                cands.append(Hypothesis(h.ids + (t,), h.score + v, t == cfg.stop_token))
        cands.sort(key=lambda h: (-h.score, h.ids))
        live = []
        for n, c in enumerate(cands):
            if c.stopped or len(c.ids) >= cfg.max_tokens:
                finished.append(c)
                finished_best = max(finished_best, c.score)
            else:
                live.append(c)
                if len(live) == width:
                    pruned = pruned or n + 1 < len(cands)
                    break
    return finished, pruned


def beam_search(prompt: PromptSpec | Sequence[int], backend: Backend, cfg: DecoderConfig,
                vocab_size: int | None = None) -> list[Hypothesis]:
    """Constrained beam search over raw cumulative log-probability.

    Hypotheses complete on the stop token or at ``max_tokens`` (stop
    included); completed ones leave the beam and their slots are refilled.
    A pass ends when no hypothesis is live, or when ``beam_width`` are
    complete and no live one outscores the best complete one.

    Pruning alone can drop the greedy path, so one pass runs per width
    ``1..beam_width`` and the completed hypotheses are merged.  Width 1 is
    greedy decoding, hence the top score never falls below greedy and never
    decreases as the width grows.  A full-width pass that prunes nothing is
    already exact and is returned alone.
    """
    base = tuple(prompt.ids if isinstance(prompt, PromptSpec) else prompt)
    full, pruned = _beam_pass(base, backend, cfg, cfg.beam_width, vocab_size)
    merged = {h.ids: h for h in full}
    for width in range(1, cfg.beam_width) if pruned else ():
        for h in _beam_pass(base, backend, cfg, width, vocab_size)[0]:
            merged.setdefault(h.ids, h)
    ranked = sorted(merged.values(), key=lambda h: (-h.score, h.ids))
    return ranked[:cfg.beam_width]


def greedy_search(prompt: PromptSpec | Sequence[int], backend: Backend, cfg: DecoderConfig,
                  vocab_size: int | None = None) -> Hypothesis:
    base = tuple(prompt.ids if isinstance(prompt, PromptSpec) else prompt)
    ids: list[int] = []
    score = 0.0
    while True:
        lp = step_logprobs(backend, base + tuple(ids), len(ids), cfg, vocab_size)
        t = int(np.argmax(lp))  # first index among ties
        ids.append(t)
        score += float(lp[t])
        if t == cfg.stop_token or len(ids) >= cfg.max_tokens:
            return Hypothesis(tuple(ids), score, t == cfg.stop_token)


# --- n-gram backend -------------------------------------------------------------


class NgramModel:
    """Stupid-backoff n-gram model over token ids, normalized per context.

    Scores back off by a factor of 0.4 per level for unseen continuations of
    a seen context; unseen contexts are skipped. The unigram level uses
    add-one counts so every id keeps non-zero mass.
    """

    concurrent_safe = True

    def __init__(self, order: int, vocab_size: int, counts: dict[tuple[int, ...], Counter],
                 tokenizer: Tokenizer | None = None, backend_id: str = "ngram"):
        self.order = order
        self.vocab_size = vocab_size
        self.counts = counts
        self.tokenizer = tokenizer
        self.backend_id = backend_id
        self._totals = {ctx: sum(c.values()) for ctx, c in counts.items()}
        uni = np.ones(vocab_size)
        for t, c in counts.get((), Counter()).items():
            uni[t] += c
        self._unigram = uni / uni.sum()

    def raw_score(self, token: int, context: Sequence[int]) -> float:
        context = tuple(context)
        penalty = 1.0
        for k in range(min(self.order - 1, len(context)), 0, -1):
            ctx = context[len(context) - k:]
            seen = self.counts.get(ctx)
            if not seen:
                continue
            if seen[token] > 0:
                return penalty * seen[token] / self._totals[ctx]
            penalty *= BACKOFF
        return penalty * float(self._unigram[token])

    def next_token_logprob_array(self, prefix: Sequence[int]) -> np.ndarray:
        prefix = tuple(prefix)
        vec = self._unigram
        for k in range(1, min(self.order - 1, len(prefix)) + 1):
            ctx = prefix[len(prefix) - k:]
            seen = self.counts.get(ctx)
            if not seen:
                continue
            vec = vec * BACKOFF
            total = self._totals[ctx]
            toks = np.fromiter(seen.keys(), dtype=np.int64, count=len(seen))
            vals = np.fromiter(seen.values(), dtype=float, count=len(seen))
            vec[toks] = vals / total
        with np.errstate(divide="ignore"):
            return np.log(vec / vec.sum())

    def next_token_logprobs(self, prefix: Sequence[int]) -> dict[int, float]:
        return dict(enumerate(self.next_token_logprob_array(prefix).tolist()))

    # persistence

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "vocab_size": self.vocab_size,
            "backend_id": self.backend_id,
            "counts": [[list(ctx), sorted(c.items())] for ctx, c in sorted(self.counts.items())],
            "tokenizer": self.tokenizer.to_dict() if self.tokenizer else None,
        }

    def save(self, path: str | Path) -> None:
        data = json.dumps(self.to_dict(), separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as fh:
            fh.write(data)

    @classmethod
    def load(cls, path: str | Path) -> "NgramModel":
        with gzip.open(path, "rb") as fh:
            data = json.loads(fh.read().decode("utf-8"))
        counts = {tuple(ctx): Counter({int(t): c for t, c in items}) for ctx, items in data["counts"]}
        tok = Tokenizer.from_dict(data["tokenizer"]) if data.get("tokenizer") else None
        return cls(data["order"], data["vocab_size"], counts, tok, data.get("backend_id", "ngram"))


def train_ngram(tokens: Iterable[int], order: int, vocab_size: int | None = None,
                tokenizer: Tokenizer | None = None) -> NgramModel:
    if order < 1:
        raise ValueError("order must be >= 1")
    ids = list(tokens)
    if not ids:
        raise EmptyCorpus("no tokens to train on")
    if vocab_size is None:
        vocab_size = len(tokenizer.vocab) if tokenizer else max(ids) + 1
    counts: dict[tuple[int, ...], Counter] = defaultdict(Counter)
    for i, t in enumerate(ids):
        for k in range(0, min(order - 1, i) + 1):
            counts[tuple(ids[i - k:i])][t] += 1
    return NgramModel(order, vocab_size, dict(counts), tokenizer)


# --- external backend -----------------------------------------------------------


class ExternBackend:
    """Next-token backend served by a subprocess over JSON lines on stdin/stdout.

    Request: ``{"version": 1, "prefix": [ids]}``; response:
    ``{"version": 1, "logprobs": {"<id>": logprob, ...}}``.
    """

    concurrent_safe = False

    def __init__(self, command: Sequence[str], backend_id: str = "extern"):
        self.command = list(command)
        self.backend_id = backend_id
        self._lock = threading.Lock()
        self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      text=True, bufsize=1)

    def next_token_logprobs(self, prefix: Sequence[int]) -> dict[int, float]:
        req = json.dumps({"version": PROTOCOL_VERSION, "prefix": list(prefix)})
        with self._lock:
            if self._proc.poll() is not None:
                raise BackendFailure(f"backend exited with {self._proc.returncode}", prefix)
            self._proc.stdin.write(req + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        if not line:
            raise BackendFailure("backend closed its output", prefix)
        resp = json.loads(line)
        if resp.get("version") != PROTOCOL_VERSION:
            raise BackendFailure(f"protocol version {resp.get('version')!r} != {PROTOCOL_VERSION}", prefix)
        if "error" in resp:
            raise BackendFailure(str(resp["error"]), prefix)
        return {int(t): float(v) for t, v in resp["logprobs"].items()}

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- cases ----------------------------------------------------------------------


def decode_prediction(tok: Tokenizer, ids: Sequence[int], stop_token: int) -> str:
    ids = [t for t in ids if t != stop_token]
    text = model_text_to_source(tok.decode(ids, errors="replace"))
    return text.lstrip("\n").rstrip()


def predict_case(case: BenchmarkCase, backend: Backend, tok: Tokenizer, cfg: DecoderConfig,
                 max_context: int = 700, record_latency: bool = True) -> PredictionRecord:
    """Decode one case; ``latency_ms`` is 0 unless ``record_latency`` (keeps runs reproducible)."""
    t0 = time.perf_counter()
    prompt = assemble_prompt(case.context, case.intent, tok, max_context)
    hyps = beam_search(prompt, backend, cfg, len(tok.vocab))
    latency = (time.perf_counter() - t0) * 1000
    best = hyps[0]
    n = len(best.ids) - (1 if best.stopped else 0)
    return PredictionRecord(
        id=case.id,
        prediction=decode_prediction(tok, best.ids, cfg.stop_token),
        score=best.score,
        latency_ms=round(latency, 3) if record_latency else 0.0,
        backend_id=backend.backend_id,
        alternatives=[decode_prediction(tok, h.ids, cfg.stop_token) for h in hyps[1:]],
        n_tokens=n,
    )


def predict_batch(cases: Sequence[BenchmarkCase], backend: Backend, tok: Tokenizer, cfg: DecoderConfig,
                  max_context: int = 700, jobs: int = 1,
                  record_latency: bool = True) -> list[PredictionRecord]:
    """Predict every case in input order; a failing case yields a record with ``error`` set."""

    def one(case: BenchmarkCase) -> PredictionRecord:
        try:
            return predict_case(case, backend, tok, cfg, max_context, record_latency)
        except (BackendFailure, IntentEmpty, ValueError) as exc:
            log.warning("prediction failed for %s: %s", case.id, exc)
            return PredictionRecord(id=case.id, prediction="", backend_id=backend.backend_id, error=str(exc))

    if jobs > 1 and getattr(backend, "concurrent_safe", False):
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(one, cases))
    return [one(c) for c in cases]
