"""Lexical code tokens, BLEU/IoU similarity, and correlation with human ratings."""

from __future__ import annotations

import ast
import io
import json
import math
import re
import tokenize
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from nlgp.records import BenchmarkCase, PredictionRecord

SCHEMA_VERSION = 1
MISMATCH_THRESHOLD = 1 / 3

_SKIP = {tokenize.COMMENT, tokenize.NL, tokenize.NEWLINE, tokenize.INDENT, tokenize.DEDENT,
         tokenize.ENDMARKER, tokenize.ENCODING}
_FALLBACK_RE = re.compile(
    r"""#[^\n]*|\s+|(?P<tok>[A-Za-z_]\w*|\d[\w.]*|'''[\s\S]*?(?:'''|$)|\"\"\"[\s\S]*?(?:\"\"\"|$)"""
    r"""|'[^'\n]*'?|"[^"\n]*"?|\*\*=?|//=?|>>=?|<<=?|->|:=|[-+*/%&|^=<>!@]=|\S)"""
)


class EmptyReference(ValueError):
    pass


class BothEmpty(ValueError):
    pass


class DegenerateVariance(ValueError):
    pass


class JoinMismatch(ValueError):
    def __init__(self, missing: list[str]):
        super().__init__(f"ratings reference unknown cases: {', '.join(missing)}")
        self.missing = missing


def _fallback_lex(text: str) -> list[str]:
    return [m.group("tok") for m in _FALLBACK_RE.finditer(text) if m.group("tok")]


def lex_code(code: str) -> list[str]:
    """Split code into identifier, keyword, operator, punctuation and literal tokens.

    Comments and whitespace are dropped. Lexing errors never raise: text the
    standard tokenizer cannot handle is split by a permissive fallback.
    """
    out: list[str] = []
    lines = code.splitlines(keepends=True)
    consumed = (0, 0)
    try:
        for tok in tokenize.generate_tokens(io.StringIO(code).readline):
            if tok.type in _SKIP:
                consumed = tok.end
                continue
            if tok.type == tokenize.ERRORTOKEN and not tok.string.strip():
                continue
            out.append(tok.string)
            consumed = tok.end
    except (tokenize.TokenError, IndentationError, SyntaxError):
        row, col = consumed
        rest = "".join(lines[row:]) if row == 0 else lines[row - 1][col:] + "".join(lines[row:])
        out.extend(_fallback_lex(rest))
    return out


# --- similarity -------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuScore:
    raw: float
    smoothed: float


def bleu_scores(pred: Sequence[str], ref: Sequence[str], max_n: int = 4) -> BleuScore:
    """Single-reference BLEU-4 with brevity penalty, raw and add-one smoothed.

    The smoothed variant adds one to matched and total counts for orders
    two and up; unigram precision is never smoothed.
    """
    if not ref:
        raise EmptyReference("reference has no tokens")
    if not pred:
        return BleuScore(0.0, 0.0)
    log_raw, log_smooth = 0.0, 0.0
    raw_zero = smooth_zero = False
    for n in range(1, max_n + 1):
        p, r = _ngrams(pred, n), _ngrams(ref, n)
        matched = sum(min(c, r[g]) for g, c in p.items())
        total = max(len(pred) - n + 1, 0)
        if matched == 0 or total == 0:
            raw_zero = True
        else:
            log_raw += math.log(matched / total)
        if n == 1:
            if matched == 0:
                smooth_zero = True
            else:
                log_smooth += math.log(matched / total)
        else:
            log_smooth += math.log((matched + 1) / (total + 1))
    c, r = len(pred), len(ref)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    raw = 0.0 if raw_zero else bp * math.exp(log_raw / max_n)
    smoothed = 0.0 if smooth_zero else bp * math.exp(log_smooth / max_n)
    return BleuScore(min(raw, 1.0), min(smoothed, 1.0))


def bleu(pred: Sequence[str], ref: Sequence[str], smooth: bool = False) -> float:
    s = bleu_scores(pred, ref)
    return s.smoothed if smooth else s.raw


def iou(pred: Iterable[str], ref: Iterable[str]) -> float:
    a, b = set(pred), set(ref)
    union = a | b
    if not union:
        raise BothEmpty("prediction and reference are both empty")
    return len(a & b) / len(union)


# --- call filtering ---------------------------------------------------------------


class _CallSurface:
    def __init__(self):
        self.out: list[str] = []

    def calls_in(self, node: ast.AST) -> None:
        if isinstance(node, ast.Call):
            self.call(node)
            return
        for child in ast.iter_child_nodes(node):
            self.calls_in(child)

    def callee(self, node: ast.expr) -> None:
        if isinstance(node, ast.Name):
            self.out.append(node.id)
        elif isinstance(node, ast.Attribute):
            self.callee(node.value)
            self.out += [".", node.attr]
        elif isinstance(node, ast.Call):
            self.call(node)
        elif isinstance(node, ast.Subscript):
            self.callee(node.value)
        else:
            self.calls_in(node)

    def call(self, node: ast.Call) -> None:
        self.callee(node.func)
        self.out.append("(")
        for arg in node.args:
            self.calls_in(arg)
        for kw in node.keywords:
            if kw.arg is not None:
                self.out.append(kw.arg)
            self.calls_in(kw.value)
        self.out.append(")")


def _call_surface_from_tokens(tokens: Sequence[str]) -> list[str]:
    out: list[str] = []
    stack: list[bool] = []  # True for call parentheses
    i = 0
    n = len(tokens)
    while i < n:
        tok = tokens[i]
        if tok.isidentifier():
            j = i + 1
            chain = [tok]
            while j + 1 < n and tokens[j] == "." and tokens[j + 1].isidentifier():
                chain += [".", tokens[j + 1]]
                j += 2
            if j < n and tokens[j] == "(":
                out += chain + ["("]
                stack.append(True)
                i = j + 1
                continue
            if stack and stack[-1] and j < n and tokens[j] == "=" and len(chain) == 1:
                out.append(tok)
            i = j
            continue
        if tok in "([{":
            stack.append(False)
        elif tok in ")]}" and stack:
            if stack.pop():
                out.append(")")
        i += 1
    return out


def call_filter(tokens: Sequence[str], code: str) -> list[str]:
    """Keep the API-call surface: callee chains, call parentheses and keyword names.

    Positional arguments survive only through calls nested in them.
    ``df = pd.read_csv('f.csv', delimiter=',')`` becomes
    ``pd . read_csv ( delimiter )``.
    """
    try:
        tree = ast.parse(code)
    except (SyntaxError, ValueError):
        return _call_surface_from_tokens(tokens)
    surface = _CallSurface()
    surface.calls_in(tree)
    return surface.out


# --- human ratings ----------------------------------------------------------------


class Rating(Enum):
    STRONGLY_DISAGREE = "strongly_disagree"
    DISAGREE = "disagree"
    AGREE = "agree"
    STRONGLY_AGREE = "strongly_agree"

    @classmethod
    def parse(cls, value: "str | Rating") -> "Rating":
        if isinstance(value, Rating):
            return value
        return cls(value.strip().lower().replace(" ", "_").replace("-", "_"))


_SCALE = {
    Rating.STRONGLY_DISAGREE: 0.0,
    Rating.DISAGREE: 1 / 3,
    Rating.AGREE: 2 / 3,
    Rating.STRONGLY_AGREE: 1.0,
}

DIMENSIONS = ("usefulness", "coverage", "precision", "compatibility")


def map_scale(r: "Rating | str") -> float:
    return _SCALE[Rating.parse(r)]


@dataclass
class RatingRecord:
    case_id: str
    rater_id: str
    usefulness: Rating
    coverage: Rating
    precision: Rating
    compatibility: Rating
    backend_id: str | None = None

    @classmethod
    def from_dict(cls, rec: dict) -> "RatingRecord":
        missing = [d for d in DIMENSIONS if d not in rec]
        if missing:
            raise ValueError(f"rating for {rec.get('case_id')} lacks {missing}")
        return cls(str(rec["case_id"]), str(rec["rater_id"]),
                   *(Rating.parse(rec[d]) for d in DIMENSIONS), rec.get("backend_id"))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("pearson needs two equal-length samples of size >= 2")
    mx = math.fsum(x) / len(x)
    my = math.fsum(y) / len(y)
    dx = [a - mx for a in x]
    dy = [b - my for b in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVariance("zero variance")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# --- report -----------------------------------------------------------------------


@dataclass
class CaseScore:
    case_id: str
    backend_id: str
    bleu: float
    bleu_smoothed: float
    iou: float
    bleu_call: float | None = None
    iou_call: float | None = None
    usefulness: list[float] = field(default_factory=list)


def score_case(pred: str, target: str, with_calls: bool = True) -> dict:
    p, t = lex_code(pred), lex_code(target)
    b = bleu_scores(p, t)
    out = {"bleu": b.raw, "bleu_smoothed": b.smoothed, "iou": iou(p, t)}
    if with_calls:
        pc, tc = call_filter(p, pred), call_filter(t, target)
        out["bleu_call"] = bleu(pc, tc) if tc else None
        out["iou_call"] = iou(pc, tc) if (pc or tc) else None
    return out


METRIC_COLUMNS = ("bleu", "bleu_smoothed", "iou")
CALL_COLUMNS = ("bleu_call", "iou_call")


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None


def _row(name: str, scores: list[CaseScore], call_columns: bool, per_rater: bool) -> dict:
    row: dict = {"backend": name, "n": len(scores)}
    columns = METRIC_COLUMNS + (CALL_COLUMNS if call_columns else ())
    for col in columns:
        vals = [getattr(s, col) for s in scores if getattr(s, col) is not None]
        row[col] = _mean(vals)
    rated = [s for s in scores if s.usefulness]
    row["n_rated"] = len(rated)
    for col in columns:
        xs, ys = [], []
        for s in rated:
            v = getattr(s, col)
            if v is None:
                continue
            if per_rater:
                xs += [v] * len(s.usefulness)
                ys += s.usefulness
            else:
                xs.append(v)
                ys.append(math.fsum(s.usefulness) / len(s.usefulness))
        key = f"rho_{col}"
        try:
            row[key] = pearson(xs, ys)
        except DegenerateVariance:
            row[key] = None
            row.setdefault("degenerate", []).append(key)
        except ValueError:
            row[key] = None
    return row


@dataclass
class ScoreTable:
    rows: list[dict]
    cases: list[CaseScore]
    flagged: list[dict]

    def to_json(self) -> str:
        data = {
            "schema_version": SCHEMA_VERSION,
            "rows": self.rows,
            "cases": [vars(c) for c in self.cases],
            "flagged": self.flagged,
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def to_tsv(self) -> str:
        cols = ["backend", "n", "n_rated"]
        for row in self.rows:
            for k in row:
                if k not in cols and k != "degenerate":
                    cols.append(k)
        lines = ["\t".join(cols)]
        for row in self.rows:
            cells = []
            for c in cols:
                v = row.get(c)
                cells.append("" if v is None else f"{v:.6f}" if isinstance(v, float) else str(v))
            lines.append("\t".join(cells))
        return f"# schema_version={SCHEMA_VERSION}\n" + "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.tsv").write_text(self.to_tsv(), "utf-8")
        (out_dir / "report.json").write_text(self.to_json(), "utf-8")


def score_report(
    predictions: Iterable[PredictionRecord],
    benchmark: Iterable[BenchmarkCase],
    ratings: Iterable[RatingRecord] = (),
    call_columns: bool = True,
    per_rater: bool = False,
) -> ScoreTable:
    """Per-backend mean metrics and their Pearson correlation with usefulness.

    Ratings join to predictions on ``(case_id, backend_id)``; a rating
    without a backend id applies to every backend's prediction of that case.
    """
    targets = {c.id: c.target for c in benchmark}
    preds = sorted(predictions, key=lambda p: (p.backend_id, p.id))
    unknown = sorted({p.id for p in preds if p.id not in targets})
    if unknown:
        raise JoinMismatch(unknown)
    rating_map: dict[tuple[str, str | None], list[float]] = defaultdict(list)
    for r in ratings:
        rating_map[(r.case_id, r.backend_id)].append(map_scale(r.usefulness))
    pred_keys = {(p.id, p.backend_id) for p in preds}
    pred_ids = {p.id for p in preds}
    orphan = sorted(f"{cid}/{bid}" if bid is not None else cid for cid, bid in rating_map
                    if (bid is None and cid not in pred_ids) or (bid is not None and (cid, bid) not in pred_keys))
    if orphan:
        raise JoinMismatch(orphan)

    cases: list[CaseScore] = []
    for p in preds:
        s = score_case(p.prediction or "", targets[p.id], call_columns)
        cs = CaseScore(p.id, p.backend_id, **s)
        cs.usefulness = rating_map.get((p.id, p.backend_id), []) + rating_map.get((p.id, None), [])
        cases.append(cs)

    by_backend: dict[str, list[CaseScore]] = defaultdict(list)
    for c in cases:
        by_backend[c.backend_id].append(c)
    rows = [_row(b, by_backend[b], call_columns, per_rater) for b in sorted(by_backend)]
    if len(by_backend) > 1:
        rows.append(_row("all models", cases, call_columns, per_rater))
    flagged = []
    for c in cases:
        if c.usefulness:
            mean_u = math.fsum(c.usefulness) / len(c.usefulness)
            if abs(c.iou - mean_u) > MISMATCH_THRESHOLD:
                flagged.append({"case_id": c.case_id, "backend_id": c.backend_id, "iou": c.iou, "usefulness": mean_u})
    return ScoreTable(rows, cases, flagged)
