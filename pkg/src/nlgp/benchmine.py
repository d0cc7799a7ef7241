"""Benchmark mining: candidate extraction, overlap filtering, curation and postprocessing."""

from __future__ import annotations

import ast
import io
import itertools
import random
import re
import textwrap
import tokenize
from collections import Counter, defaultdict
from dataclasses import dataclass
from statistics import fmean
from typing import Iterable, Sequence

from nlgp.corpus import CELL, CODE, ScriptDoc, _comment_line, render_plain
from nlgp.docmap import EntityDocMapping, ModuleFrequency, import_roots
from nlgp.inject import resolve_source
from nlgp.langid import LanguageClassifier, default_classifier
from nlgp.records import BenchmarkCase

MAX_INTENT_TOKENS = 10
PROBE_LINES = 3
MAX_SPAN_DIFF = 2
RATERS = 3


class WrongAnnotatorCount(ValueError):
    pass


@dataclass
class CandidateCase:
    id: str
    context: str
    intent: str
    target: str
    source_path: str = ""
    line: int = 0
    project: str = ""
    block_lines: int = 0  # target lines before the next comment or cell boundary

    @property
    def target_lines(self) -> list[str]:
        return self.target.splitlines()


@dataclass
class AnnotationRecord:
    """One annotator's verdict; ``target_line_span`` is 1-based and inclusive."""

    case_id: str
    annotator_id: str
    relevant: bool
    revised_intent: str = ""
    target_line_span: tuple[int, int] | None = None

    @classmethod
    def from_dict(cls, rec: dict) -> "AnnotationRecord":
        span = rec.get("target_line_span")
        return cls(str(rec["case_id"]), str(rec["annotator_id"]), bool(rec["relevant"]),
                   rec.get("revised_intent") or "", tuple(span) if span else None)


@dataclass
class Acceptance:
    case_id: str
    span: tuple[int, int]
    intent: str | None = None
    pair: tuple[str, str] = ("", "")


@dataclass
class BenchmarkStats:
    count: int
    mean_context_loc: float
    mean_target_loc: float
    mean_intent_tokens: float

    def as_tuple(self) -> tuple:
        return (self.count, self.mean_context_loc, self.mean_target_loc, self.mean_intent_tokens)


# --- generation -----------------------------------------------------------------


def intent_tokens(intent: str) -> list[str]:
    """Whitespace tokens of a comment, ignoring the leading ``#`` markers."""
    return intent.strip().lstrip("#").split()


def _candidates_in(script: ScriptDoc, max_tokens: int, classifier: LanguageClassifier) -> list[CandidateCase]:
    out = []
    lines = script.lines
    for i, ln in enumerate(lines):
        if not ln.is_comment:
            continue
        words = ln.text.split()
        if not words or len(words) > max_tokens or not classifier.is_english(ln.text):
            continue
        target, block = [], None
        for t in lines[i + 1:]:
            if t.kind == CODE and t.text.strip() and not t.magic:
                target.append(t.text)
            elif block is None and target and (t.is_comment or t.kind == CELL):
                block = len(target)
        if not target:
            continue
        prefix = ScriptDoc(lines[:i], script.source_path, script.project)
        out.append(CandidateCase(
            id=f"{script.source_path}:{i + 1}",
            context=render_plain(prefix),
            intent=_comment_line(ln),
            target="\n".join(target),
            source_path=script.source_path,
            line=i + 1,
            project=script.project,
            block_lines=block if block is not None else len(target),
        ))
    return out


def mine_candidates(
    scripts: Iterable[ScriptDoc],
    max_intent_tokens: int = MAX_INTENT_TOKENS,
    sample_n: int | None = None,
    seed: int = 0,
    classifier: LanguageClassifier | None = None,
) -> list[CandidateCase]:
    """Comment-only lines with at most ``max_intent_tokens`` words, English, with code after them.

    ``sample_n`` draws that many candidates uniformly without replacement.
    """
    classifier = classifier or default_classifier()
    pool = []
    for s in scripts:
        if s.split not in ("eval", "unassigned"):
            raise ValueError(f"{s.source_path}: candidates come from eval scripts only (split={s.split})")
        pool.extend(_candidates_in(s, max_intent_tokens, classifier))
    pool.sort(key=lambda c: (c.source_path, c.line))
    if sample_n is not None and sample_n < len(pool):
        pool = random.Random(seed).sample(pool, sample_n)
    return pool


def overlap_probe(cand: CandidateCase) -> str:
    recent = [ln for ln in cand.context.splitlines() if ln.strip()][-PROBE_LINES:]
    return "\n".join(recent + [cand.intent])


def overlap_filter(cands: Sequence[CandidateCase], train_corpus: bytes | str) -> tuple[list[CandidateCase], list[CandidateCase]]:
    """Split candidates into (kept, dropped) by verbatim probe occurrence in the training text."""
    text = train_corpus.decode("utf-8", "surrogateescape") if isinstance(train_corpus, bytes) else train_corpus
    kept, dropped = [], []
    for c in cands:
        (dropped if overlap_probe(c) in text else kept).append(c)
    return kept, dropped


# --- curation -------------------------------------------------------------------


def span_difference(a: tuple[int, int], b: tuple[int, int]) -> int:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def group_annotations(records: Iterable[AnnotationRecord]) -> dict[str, list[AnnotationRecord]]:
    groups: dict[str, list[AnnotationRecord]] = defaultdict(list)
    for r in records:
        groups[r.case_id].append(r)
    return dict(groups)


def _majority_intent(recs: Sequence[AnnotationRecord]) -> str | None:
    votes = Counter(r.revised_intent.strip() for r in recs if r.relevant and r.revised_intent.strip())
    if not votes:
        return None
    best, n = min(votes.items(), key=lambda kv: (-kv[1], kv[0]))
    return best if n * 2 > len(recs) else None


def accept_case(recs: Sequence[AnnotationRecord], raters: int = RATERS) -> Acceptance | None:
    if len(recs) != raters:
        raise WrongAnnotatorCount(f"case {recs[0].case_id if recs else '?'}: {len(recs)} annotations, expected {raters}")
    relevant = sorted((r for r in recs if r.relevant and r.target_line_span), key=lambda r: r.annotator_id)
    for a, b in itertools.combinations(relevant, 2):
        if span_difference(a.target_line_span, b.target_line_span) <= MAX_SPAN_DIFF:
            span = a.target_line_span  # equal spans, or the first annotator's by id
            return Acceptance(a.case_id, tuple(span), _majority_intent(recs), (a.annotator_id, b.annotator_id))
    return None


def curation_accept(records: Iterable[AnnotationRecord], raters: int = RATERS) -> dict[str, Acceptance]:
    """Accepted case ids mapped to their consensus span and majority intent."""
    out = {}
    for case_id, recs in sorted(group_annotations(records).items()):
        acc = accept_case(recs, raters)
        if acc is not None:
            out[case_id] = acc
    return out


def fleiss_kappa(matrix: Sequence[Sequence[bool]]) -> float:
    """Fleiss' kappa for binary ratings; rows are cases, columns raters.

    If every rating falls in one category the chance agreement is 1 and
    kappa is defined as 1.0.
    """
    if not matrix:
        raise ValueError("need at least one case")
    n = len(matrix[0])
    if n < 2 or any(len(row) != n for row in matrix):
        raise ValueError("every case needs the same number (>= 2) of raters")
    N = len(matrix)
    counts = [(sum(bool(v) for v in row), sum(not v for v in row)) for row in matrix]
    p_bar = fmean((a * a + b * b - n) / (n * (n - 1)) for a, b in counts)
    p_yes = sum(a for a, _ in counts) / (N * n)
    p_e = p_yes ** 2 + (1 - p_yes) ** 2
    if p_e == 1.0:
        return 1.0
    return (p_bar - p_e) / (1 - p_e)


def relevance_matrix(records: Iterable[AnnotationRecord]) -> list[list[bool]]:
    return [[r.relevant for r in sorted(recs, key=lambda r: r.annotator_id)]
            for _, recs in sorted(group_annotations(records).items())]


def auto_span(cand: CandidateCase, max_lines: int = 3) -> tuple[int, int]:
    """Stand-in for a human selection.

    The longest parseable prefix of the code block right after the comment,
    at most ``max_lines`` long.
    """
    lines = cand.target_lines
    limit = min(max_lines, cand.block_lines or len(lines), len(lines))
    for k in range(limit, 0, -1):
        try:
            ast.parse("\n".join(ln.lstrip() if k == 1 else ln for ln in lines[:k]))
        except SyntaxError:
            continue
        return (1, k)
    return (1, 1)


# --- postprocessing -------------------------------------------------------------


def strip_code_comments(code: str) -> str:
    """Drop comment lines and trailing inline comments."""
    lines = code.splitlines()
    cuts: dict[int, int] = {}
    try:
        for tok in tokenize.generate_tokens(io.StringIO(code + "\n").readline):
            if tok.type == tokenize.COMMENT:
                cuts[tok.start[0] - 1] = tok.start[1]
    except (tokenize.TokenError, IndentationError, SyntaxError):
        cuts = {i: m.start() for i, ln in enumerate(lines) if (m := re.search(r"(^|\s)#", ln))}
    out = []
    for i, ln in enumerate(lines):
        if i in cuts:
            ln = ln[:cuts[i]].rstrip()
            if not ln.strip():
                continue
        out.append(ln)
    return "\n".join(out)


def _import_names(line: str) -> set[str] | None:
    """Names bound by a single-line import statement, else None."""
    try:
        tree = ast.parse(line.strip())
    except SyntaxError:
        return None
    if len(tree.body) != 1 or not isinstance(tree.body[0], (ast.Import, ast.ImportFrom)):
        return None
    stmt = tree.body[0]
    names = set()
    for a in stmt.names:
        if a.name == "*":
            return None
        names.add(a.asname or a.name.split(".")[0])
    return names


def _uses(name: str, text: str) -> bool:
    return re.search(rf"(?<![\w.]){re.escape(name)}\b", text) is not None


def move_target_imports(context: str, target: str) -> tuple[str, str]:
    """Move context imports whose names are used by the target but nowhere else in the context."""
    ctx_lines = context.splitlines()
    code_only = [strip_code_comments(ln) if "#" in ln else ln for ln in ctx_lines]
    moved, keep = [], []
    for i, ln in enumerate(ctx_lines):
        names = _import_names(ln) if ln and not ln[0].isspace() else None
        if names:
            rest = "\n".join(code_only[:i] + code_only[i + 1:])
            if all(_uses(n, target) and not _uses(n, rest) for n in names):
                moved.append(ln.strip())
                continue
        keep.append(ln)
    if not moved:
        return context, target
    new_ctx = "".join(ln + "\n" for ln in keep)
    return new_ctx, "\n".join(moved + [target])


def postprocess(cand: CandidateCase, acc: Acceptance) -> BenchmarkCase:
    lines = cand.target_lines
    first, last = acc.span
    if not 1 <= first <= last <= len(lines):
        raise ValueError(f"{cand.id}: span {acc.span} outside 1..{len(lines)}")
    context = cand.context + "".join(ln + "\n" for ln in lines[:first - 1])
    target = strip_code_comments("\n".join(lines[first - 1:last]))
    context, target = move_target_imports(context, target)
    return BenchmarkCase(
        id=cand.id,
        context=context,
        intent=acc.intent if acc.intent else cand.intent,
        target=target,
        provenance={"source_path": cand.source_path, "line": cand.line, "project": cand.project,
                    "span": list(acc.span)},
    )


# --- statistics -----------------------------------------------------------------


def benchmark_stats(cases: Sequence[BenchmarkCase]) -> BenchmarkStats:
    if not cases:
        raise ValueError("no cases")
    return BenchmarkStats(
        count=len(cases),
        mean_context_loc=fmean(len(c.context.splitlines()) for c in cases),
        mean_target_loc=fmean(len(c.target.splitlines()) for c in cases),
        mean_intent_tokens=fmean(len(intent_tokens(c.intent)) for c in cases),
    )


def _parseable(src: str) -> str:
    return textwrap.dedent("\n".join("" if ln.lstrip().startswith(("%", "!")) else ln for ln in src.splitlines()))


def case_modules(case: BenchmarkCase) -> set[str]:
    """Root modules of the target's imports and resolvable calls (context supplies bindings)."""
    target = _parseable(case.target)
    tree = ast.parse(target)  # SyntaxError propagates to the caller
    roots = set().union(*import_roots(tree))
    ctx = _parseable(case.context)
    offset = len(ctx.splitlines())
    mapping = EntityDocMapping()
    try:
        sites = resolve_source(ctx + "\n" + target, mapping)
    except ValueError:
        offset, sites = -1, resolve_source(target, mapping)
    for s in sites:
        if s.statement_line > offset and s.resolved_fqpn and not s.resolved_fqpn.startswith("builtins."):
            roots.add(s.resolved_fqpn.split(".")[0])
    return roots


def module_distribution(cases: Iterable[BenchmarkCase]) -> ModuleFrequency:
    freq = ModuleFrequency()
    for c in cases:
        try:
            freq.counts.update(case_modules(c))
        except (SyntaxError, ValueError) as exc:
            freq.errors.append(f"{c.id}: {exc}")
    return freq


def auto_accept(cands: Sequence[CandidateCase]) -> dict[str, Acceptance]:
    """Acceptance without human review: every candidate with an automatic span."""
    return {c.id: Acceptance(c.id, auto_span(c)) for c in cands}

