"""Notebook corpus ingest: conversion to annotated scripts, cleaning, splitting."""

from __future__ import annotations

import ast
import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from nlgp import special
from nlgp.langid import LanguageClassifier, default_classifier

log = logging.getLogger(__name__)

CODE = "code"
COMMENT = "comment"
CELL = "cell_boundary"
EOC = "end_of_comment_marker_carrier"
COMMENT_KINDS = (COMMENT, EOC)

MAX_COMMENT_RUN = 2
INDENT_WIDTH = 4

# nbconvert cell delimiters: "# In[ ]:", "# In [1]", "# In[12]:"
DELIMITER_RE = re.compile(r"^#\s*In\s*\[\s*\d*\s*\]\s*:?\s*$")
PLAIN_DELIMITER = "# In[ ]:"


class NonPythonNotebook(ValueError):
    pass


class MalformedNotebook(ValueError):
    pass


@dataclass
class ProjectMeta:
    project_name: str
    star_count: int
    license_id: str
    notebook_paths: list[str]

    def __post_init__(self):
        if not self.project_name:
            raise ValueError("project_name must be non-empty")
        if self.star_count < 0:
            raise ValueError(f"{self.project_name}: star_count must be >= 0")
        if not self.notebook_paths:
            raise ValueError(f"{self.project_name}: notebook_paths must be non-empty")


@dataclass(frozen=True)
class Cell:
    kind: str
    source_lines: tuple[str, ...]

    def __post_init__(self):
        if self.kind not in ("code", "markdown"):
            raise ValueError(f"unsupported cell kind {self.kind!r}")


@dataclass
class NotebookDoc:
    cells: list[Cell]
    source_path: str = ""
    project: str = ""


@dataclass(frozen=True)
class ScriptLine:
    """One line of a normalized script.

    Code lines keep their full text. Comment lines store the comment body
    (without ``#``) in ``text`` and the leading whitespace in ``indent``.
    """

    kind: str
    text: str = ""
    indent: str = ""
    magic: bool = False

    @property
    def is_comment(self) -> bool:
        return self.kind in COMMENT_KINDS

    def is_blank(self) -> bool:
        return self.kind == CODE and not self.text.strip()


@dataclass
class ScriptDoc:
    lines: list[ScriptLine]
    source_path: str = ""
    project: str = ""
    split: str = "unassigned"
    meta: dict = field(default_factory=dict)


def comment(text: str, indent: str = "") -> ScriptLine:
    return ScriptLine(COMMENT, text, indent)


def code(text: str) -> ScriptLine:
    stripped = text.lstrip()
    return ScriptLine(CODE, text, magic=stripped.startswith(("%", "!")))


def boundary() -> ScriptLine:
    return ScriptLine(CELL)


# --- projects -------------------------------------------------------------------


def filter_forks(projects: Iterable[ProjectMeta]) -> list[ProjectMeta]:
    """Keep one project per name: the most starred, earliest on ties."""
    best: dict[str, ProjectMeta] = {}
    for p in projects:
        kept = best.get(p.project_name)
        if kept is None or p.star_count > kept.star_count:
            best[p.project_name] = p
    # dict preserves first-insertion order of names
    return list(best.values())


def load_manifest(path: str | Path) -> list[ProjectMeta]:
    """Read a project manifest (JSON list or JSON lines).

    Records look like ``{"name", "stars", "license", "paths"}``; relative
    notebook paths are resolved against the manifest's directory.
    """
    path = Path(path)
    text = path.read_text("utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        records = json.loads(text)
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    base = path.parent
    projects = []
    for rec in records:
        paths = [str(p if Path(p).is_absolute() else base / p) for p in rec["paths"]]
        projects.append(
            ProjectMeta(
                project_name=rec["name"],
                star_count=int(rec["stars"]),
                license_id=rec.get("license", ""),
                notebook_paths=paths,
            )
        )
    return projects


# --- notebooks ------------------------------------------------------------------


def _split_source(source) -> list[str]:
    if isinstance(source, list):
        source = "".join(source)
    if not isinstance(source, str):
        raise MalformedNotebook("cell source must be a string or list of strings")
    if not source:
        return []
    lines = source.split("\n")
    if lines[-1] == "":
        lines.pop()
    return [ln.rstrip("\r") for ln in lines]


def parse_notebook(data: dict, source_path: str = "", project: str = "") -> NotebookDoc:
    if not isinstance(data, dict) or "cells" not in data:
        raise MalformedNotebook(f"{source_path}: missing 'cells'")
    if data.get("nbformat") not in (4, None):
        raise MalformedNotebook(f"{source_path}: nbformat {data.get('nbformat')} is not 4")
    meta = data.get("metadata") or {}
    lang = (meta.get("kernelspec") or {}).get("language") or (meta.get("language_info") or {}).get("name")
    if lang and lang.lower() != "python":
        raise NonPythonNotebook(f"{source_path}: kernel language {lang!r}")
    cells = []
    for raw in data["cells"]:
        if not isinstance(raw, dict) or "cell_type" not in raw or "source" not in raw:
            raise MalformedNotebook(f"{source_path}: cell without cell_type/source")
        if raw["cell_type"] == "raw":
            continue
        try:
            cells.append(Cell(raw["cell_type"], tuple(_split_source(raw["source"]))))
        except ValueError as exc:
            raise MalformedNotebook(f"{source_path}: {exc}") from None
    return NotebookDoc(cells, source_path, project)


def read_notebook(path: str | Path, project: str = "") -> NotebookDoc:
    try:
        data = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedNotebook(f"{path}: {exc}") from None
    return parse_notebook(data, str(path), project)


def comment_body(line: str) -> str:
    """Strip comment and markdown-header '#' symbols: ``# ## Title`` -> ``Title``."""
    return line.strip().lstrip("#").strip()


def _classify(line: str) -> ScriptLine:
    stripped = line.lstrip()
    if stripped.startswith("#"):
        return comment(comment_body(stripped), line[: len(line) - len(stripped)])
    return code(line)


def notebook_to_script(nb: NotebookDoc, classifier: LanguageClassifier | None = None) -> ScriptDoc:
    lines: list[ScriptLine] = []
    seen_code = False
    for cell in nb.cells:
        if cell.kind == "markdown":
            if not seen_code:
                continue
            lines.extend(comment(comment_body(ln)) for ln in cell.source_lines)
        else:
            seen_code = True
            lines.extend(_classify(ln) for ln in cell.source_lines)
            lines.append(boundary())
    doc = ScriptDoc(lines, nb.source_path, nb.project)
    return clean_script(doc, classifier)


def script_from_source(text: str, source_path: str = "", project: str = "", keep_preamble: bool = False) -> ScriptDoc:
    """Build an (uncleaned) script from Python source, nbconvert-style or plain.

    Cell delimiter comments open a new cell; content before the first
    delimiter is dropped unless ``keep_preamble``, as nbconvert places headers
    and leading markdown there. Source without delimiters becomes a single
    cell-less script.
    """
    raw = text.split("\n")
    if raw and raw[-1] == "":
        raw.pop()
    has_cells = any(DELIMITER_RE.match(ln.strip()) for ln in raw)
    lines: list[ScriptLine] = []
    started = not has_cells
    for ln in raw:
        ln = ln.rstrip("\r")
        if has_cells and DELIMITER_RE.match(ln.strip()):
            if started and lines:
                lines.append(boundary())
            started = True
            continue
        if started:
            lines.append(_classify(ln))
    if has_cells and started:
        lines.append(boundary())
    return ScriptDoc(lines, source_path, project)


# --- cleaning -------------------------------------------------------------------


def _expand_indent(text: str) -> str:
    stripped = text.lstrip(" \t")
    lead = text[: len(text) - len(stripped)]
    if "\t" not in lead:
        return text
    return lead.expandtabs(INDENT_WIDTH) + stripped


def _truncate_runs(lines: list[ScriptLine]) -> list[ScriptLine]:
    out = []
    run = 0
    for ln in lines:
        run = run + 1 if ln.is_comment else 0
        if run <= MAX_COMMENT_RUN:
            out.append(ln)
    return out


def _drop_empty_cells(lines: list[ScriptLine]) -> list[ScriptLine]:
    out: list[ScriptLine] = []
    segment: list[ScriptLine] = []
    for ln in lines:
        if ln.kind == CELL:
            if any(not s.is_blank() for s in segment):
                out.extend(segment)
                out.append(ln)
            segment = []
        else:
            segment.append(ln)
    if any(not s.is_blank() for s in segment):
        out.extend(segment)
    return out


def place_markers(lines: list[ScriptLine]) -> list[ScriptLine]:
    """Mark the last line of every comment run whose next non-blank line is code."""
    out = list(lines)
    for i, ln in enumerate(out):
        if not ln.is_comment:
            continue
        j = i + 1
        while j < len(out) and out[j].is_blank():
            j += 1
        kind = EOC if j < len(out) and out[j].kind == CODE else COMMENT
        if ln.kind != kind:
            out[i] = replace(ln, kind=kind)
    return out


def clean_script(s: ScriptDoc, classifier: LanguageClassifier | None = None) -> ScriptDoc:
    classifier = classifier or default_classifier()
    lines = []
    for ln in s.lines:
        if ln.kind == CODE:
            lines.append(replace(ln, text=_expand_indent(ln.text)))
        elif ln.is_comment:
            text = comment_body(ln.text)
            if text and classifier.is_english(text):
                lines.append(ScriptLine(COMMENT, text, ln.indent.expandtabs(INDENT_WIDTH)))
        else:
            lines.append(ln)
    lines = _truncate_runs(lines)
    lines = _drop_empty_cells(lines)
    lines = place_markers(lines)
    return replace(s, lines=lines)


def strip_comments(s: ScriptDoc) -> ScriptDoc:
    return replace(s, lines=[ln for ln in s.lines if not ln.is_comment])


# --- rendering ------------------------------------------------------------------


def _comment_line(ln: ScriptLine) -> str:
    return f"{ln.indent}# {ln.text}"


def render_script(s: ScriptDoc) -> str:
    """Serialized script form: one line per ScriptLine, structural tokens inline."""
    out = []
    for ln in s.lines:
        if ln.kind == CODE:
            out.append(ln.text)
        elif ln.kind == CELL:
            out.append(special.CELL)
        elif ln.kind == EOC:
            out.append(_comment_line(ln) + special.END_OF_COMMENT)
        else:
            out.append(_comment_line(ln))
    return "".join(line + "\n" for line in out)


def parse_script(text: str, source_path: str = "", project: str = "") -> ScriptDoc:
    """Inverse of :func:`render_script`."""
    lines = []
    raw = text.split("\n")
    if raw and raw[-1] == "":
        raw.pop()
    for ln in raw:
        if ln == special.CELL:
            lines.append(boundary())
            continue
        stripped = ln.lstrip()
        if stripped.startswith("#"):
            indent = ln[: len(ln) - len(stripped)]
            kind = COMMENT
            if stripped.endswith(special.END_OF_COMMENT):
                stripped = stripped[: -len(special.END_OF_COMMENT)]
                kind = EOC
            lines.append(ScriptLine(kind, comment_body(stripped), indent))
        else:
            lines.append(code(ln))
    return ScriptDoc(lines, source_path, project)


def render_plain(s: ScriptDoc) -> str:
    """Plain Python view: cells introduced by nbconvert-style delimiters, no tokens."""
    out = []
    at_cell_start = any(ln.kind == CELL for ln in s.lines)
    for ln in s.lines:
        if ln.kind == CELL:
            at_cell_start = True
            continue
        if at_cell_start:
            out.append(PLAIN_DELIMITER)
            at_cell_start = False
        out.append(_comment_line(ln) if ln.is_comment else ln.text)
    return "".join(line + "\n" for line in out)


def analysis_source(s: ScriptDoc) -> str:
    """Source with exactly one line per ScriptLine, for parsing.

    Cell boundaries and shell/magic lines become blank lines so line ``i + 1``
    of the parsed module is ``s.lines[i]``.
    """
    out = []
    for ln in s.lines:
        if ln.kind == CELL or ln.magic:
            out.append("")
        elif ln.is_comment:
            out.append(_comment_line(ln))
        else:
            out.append(ln.text)
    return "\n".join(out) + "\n"


def parses(s: ScriptDoc) -> bool:
    try:
        ast.parse(analysis_source(s))
    except (SyntaxError, ValueError):
        return False
    return True


def encode_indentation(text: str) -> str:
    """Replace each leading run of four spaces on every line with the indent token."""
    out = []
    for line in text.split("\n"):
        stripped = line.lstrip(" ")
        n = len(line) - len(stripped)
        out.append(special.INDENT * (n // INDENT_WIDTH) + " " * (n % INDENT_WIDTH) + stripped)
    return "\n".join(out)


def decode_indentation(text: str) -> str:
    return text.replace(special.INDENT, " " * INDENT_WIDTH)


def training_text(s: ScriptDoc) -> str:
    return encode_indentation(render_script(s))


def source_to_model_text(src: str) -> str:
    """Convert user-facing source (e.g. a benchmark context) into training form."""
    doc = script_from_source(src, keep_preamble=True)
    lines = doc.lines
    while lines and (lines[-1].kind == CELL or lines[-1].is_blank()):
        lines = lines[:-1]
    doc = replace(doc, lines=place_markers(lines))
    return training_text(doc)


def model_text_to_source(text: str) -> str:
    text = decode_indentation(text)
    text = text.replace(special.END_OF_COMMENT, "")
    return text.replace(special.CELL, "")


# --- splitting and concatenation ------------------------------------------------


def split_corpus(
    scripts: list[ScriptDoc], ratio: float = 0.9, seed: int = 0
) -> tuple[list[ScriptDoc], list[ScriptDoc]]:
    """Assign whole projects to train or eval; ``ratio`` is the train share of projects."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    projects = sorted({s.project for s in scripts})
    random.Random(seed).shuffle(projects)
    n_train = round(ratio * len(projects))
    if len(projects) >= 2:  # keep both sides non-empty
        n_train = min(max(n_train, 1), len(projects) - 1)
    train_projects = set(projects[:n_train])
    train, evals = [], []
    for s in scripts:
        if s.project in train_projects:
            train.append(replace(s, split="train"))
        else:
            evals.append(replace(s, split="eval"))
    return train, evals


def concatenate_training_file(scripts: Iterable[ScriptDoc]) -> bytes:
    return special.END_OF_TEXT.join(training_text(s) for s in scripts).encode("utf-8")


def split_training_file(data: bytes) -> list[str]:
    if not data:
        return []
    return data.decode("utf-8").split(special.END_OF_TEXT)
