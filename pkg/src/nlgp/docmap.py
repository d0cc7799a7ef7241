"""Static docstring crawler and root-module frequency counts."""

from __future__ import annotations

import ast
import inspect
import json
import logging
import os
import re
import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from nlgp.corpus import ScriptDoc, analysis_source

log = logging.getLogger(__name__)

MAX_TITLE = 300
FQPN_RE = re.compile(r"^[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)*\(\)(?:\.[A-Za-z_]\w*\(\))?$")
SENTENCE_RE = re.compile(r"^(.*?)[.!?](?=\s|$)")
STDLIB = frozenset(sys.stdlib_module_names) | {"__future__"}


class ParseError(ValueError):
    pass


@dataclass
class ModuleFrequency:
    counts: Counter = field(default_factory=Counter)
    errors: list[str] = field(default_factory=list)

    def top(self, k: int, exclude_stdlib: bool = True) -> list[tuple[str, int]]:
        items = [(m, c) for m, c in self.counts.items() if not (exclude_stdlib and m in STDLIB)]
        items.sort(key=lambda mc: (-mc[1], mc[0]))
        return items[:k]


def import_roots(tree: ast.AST) -> list[set[str]]:
    """Root module names per import statement (relative imports ignored)."""
    out = []
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            out.append({a.name.split(".")[0] for a in node.names})
        elif isinstance(node, ast.ImportFrom) and not node.level and node.module:
            out.append({node.module.split(".")[0]})
    return out


def count_root_modules(scripts: Iterable[ScriptDoc | str]) -> ModuleFrequency:
    freq = ModuleFrequency()
    for i, s in enumerate(scripts):
        src = s if isinstance(s, str) else analysis_source(s)
        name = f"#{i}" if isinstance(s, str) else (s.source_path or f"#{i}")
        try:
            tree = ast.parse(src)
        except (SyntaxError, ValueError) as exc:
            freq.errors.append(f"{name}: {exc}")
            continue
        for roots in import_roots(tree):
            freq.counts.update(roots)
    return freq


# --- docstring titles -------------------------------------------------------------


def docstring_title(doc: str | None) -> str | None:
    """First sentence of a docstring, terminator removed, at most 300 characters."""
    if not doc:
        return None
    cleaned = inspect.cleandoc(doc).strip()
    if not cleaned:
        return None
    collapsed = " ".join(cleaned.split())
    m = SENTENCE_RE.match(collapsed)
    title = m.group(1).strip() if m else cleaned.splitlines()[0].strip()
    title = title[:MAX_TITLE].strip()
    return title or None


def is_private(name: str) -> bool:
    return name.startswith("_")


@dataclass
class _Entity:
    module: str
    qualname: tuple[str, ...]  # (func,) | (Class,) | (Class, method)
    kind: str
    title: str | None
    source_path: str


@dataclass
class _Module:
    name: str
    path: str
    is_package: bool
    defs: dict[str, list[_Entity]] = field(default_factory=dict)
    aliases: dict[str, tuple[str, str]] = field(default_factory=dict)  # local -> (module, name)
    stars: list[str] = field(default_factory=list)
    all_names: list[str] | None = None


@dataclass
class EntityDocMapping:
    entries: dict[str, str] = field(default_factory=dict)
    sources: dict[str, str] = field(default_factory=dict)
    kinds: dict[str, str] = field(default_factory=dict)
    visited: int = 0
    documented: int = 0
    crawl_log: list[dict] = field(default_factory=list)
    collisions: list[str] = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return self.documented / self.visited if self.visited else 0.0

    def __contains__(self, fqpn: str) -> bool:
        return fqpn in self.entries

    def get(self, fqpn: str) -> str | None:
        return self.entries.get(fqpn)

    def is_class(self, fqpn: str) -> bool:
        """Whether a ``path()`` FQPN names a class.

        Uses the recorded kind when known; otherwise a class is anything with
        mapped methods or a capitalized final name.
        """
        kind = self.kinds.get(fqpn)
        if kind is not None:
            return kind == "class"
        prefix = fqpn + "."
        if any(k.startswith(prefix) for k in self.entries):
            return True
        last = fqpn[:-2].rsplit(".", 1)[-1]
        return last[:1].isupper()

    @classmethod
    def from_titles(cls, titles: dict[str, str]) -> "EntityDocMapping":
        m = cls(entries=dict(titles))
        m.visited = m.documented = len(titles)
        return m

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for fqpn in sorted(self.entries):
                rec = {"fqpn": fqpn, "title": self.entries[fqpn], "source_path": self.sources.get(fqpn, "")}
                if fqpn in self.kinds:
                    rec["kind"] = self.kinds[fqpn]
                fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
            summary = {"coverage": self.coverage, "visited": self.visited, "documented": self.documented,
                       "entries": len(self.entries)}
            fh.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EntityDocMapping":
        m = cls()
        for line in Path(path).read_text("utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "summary" in rec:
                m.visited = rec["summary"].get("visited", 0)
                m.documented = rec["summary"].get("documented", 0)
                continue
            m.entries[rec["fqpn"]] = rec["title"]
            if rec.get("source_path"):
                m.sources[rec["fqpn"]] = rec["source_path"]
            if rec.get("kind"):
                m.kinds[rec["fqpn"]] = rec["kind"]
        return m


# --- crawler ----------------------------------------------------------------------


def _module_files(root: Path) -> list[tuple[str, Path, bool]]:
    out = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        rel = Path(dirpath).relative_to(root)
        for fn in sorted(filenames):
            if not fn.endswith(".py"):
                continue
            parts = list(rel.parts)
            is_pkg = fn == "__init__.py"
            if not is_pkg:
                parts.append(fn[:-3])
            if not parts or not all(p.isidentifier() for p in parts):
                continue
            out.append((".".join(parts), Path(dirpath) / fn, is_pkg))
    return out


def _resolve_relative(mod: _Module, level: int, target: str | None) -> str:
    base = mod.name.split(".")
    if not mod.is_package:
        base = base[:-1]
    if level > 1:
        base = base[: len(base) - (level - 1)]
    if target:
        base = base + target.split(".")
    return ".".join(base)


def _top_level_statements(body: list[ast.stmt]) -> Iterable[ast.stmt]:
    for node in body:
        yield node
        if isinstance(node, ast.If):
            yield from _top_level_statements(node.body)
            yield from _top_level_statements(node.orelse)
        elif isinstance(node, ast.Try):
            yield from _top_level_statements(node.body)
            for h in node.handlers:
                yield from _top_level_statements(h.body)
            yield from _top_level_statements(node.orelse)


def _scan_module(mod: _Module, tree: ast.Module) -> None:
    for node in _top_level_statements(tree.body):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            ent = _Entity(mod.name, (node.name,), "function", docstring_title(ast.get_docstring(node)), mod.path)
            mod.defs[node.name] = [ent]
        elif isinstance(node, ast.ClassDef):
            title = docstring_title(ast.get_docstring(node))
            methods = []
            for sub in node.body:
                if not isinstance(sub, (ast.FunctionDef, ast.AsyncFunctionDef)):
                    continue
                if sub.name == "__init__":
                    if title is None:
                        title = docstring_title(ast.get_docstring(sub))
                    continue
                if is_private(sub.name):
                    continue
                methods.append(_Entity(mod.name, (node.name, sub.name), "method",
                                       docstring_title(ast.get_docstring(sub)), mod.path))
            mod.defs[node.name] = [_Entity(mod.name, (node.name,), "class", title, mod.path)] + methods
        elif isinstance(node, ast.ImportFrom):
            target = _resolve_relative(mod, node.level, node.module) if node.level else node.module
            if not target:
                continue
            for alias in node.names:
                if alias.name == "*":
                    mod.stars.append(target)
                else:
                    mod.aliases[alias.asname or alias.name] = (target, alias.name)
        elif isinstance(node, ast.Assign) and any(isinstance(t, ast.Name) and t.id == "__all__" for t in node.targets):
            try:
                value = ast.literal_eval(node.value)
            except ValueError:
                continue
            if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
                mod.all_names = list(value)


class _Crawler:
    def __init__(self, modules: dict[str, _Module]):
        self.modules = modules
        self._ns: dict[str, dict[str, list[_Entity]]] = {}

    def namespace(self, name: str, stack: frozenset = frozenset()) -> dict[str, list[_Entity]]:
        """Public names visible in a module, mapped to the entities they denote."""
        if name in self._ns:
            return self._ns[name]
        mod = self.modules.get(name)
        if mod is None or name in stack:
            return {}
        stack = stack | {name}
        ns: dict[str, list[_Entity]] = {}
        for target in mod.stars:
            target_ns = self.namespace(target, stack)
            tmod = self.modules.get(target)
            allowed = tmod.all_names if tmod is not None and tmod.all_names is not None else None
            for n, ents in target_ns.items():
                if allowed is None or n in allowed:
                    ns[n] = ents
        for local, (target, orig) in mod.aliases.items():
            ents = self.namespace(target, stack).get(orig)
            if ents is None and target in self.modules and orig in self.modules[target].defs:
                ents = self.modules[target].defs[orig]
            if ents:
                ns[local] = ents
        ns.update(mod.defs)
        ns = {n: e for n, e in ns.items() if not is_private(n)}
        self._ns[name] = ns
        return ns


def _fqpn(module: str, export_name: str, ent: _Entity) -> str:
    if ent.kind == "method":
        return f"{module}.{export_name}().{ent.qualname[1]}()"
    return f"{module}.{export_name}()"


def crawl_docstrings(source_roots: Iterable[str | Path], module_filter: Iterable[str] | None = None) -> EntityDocMapping:
    """Map public callables found in source trees to their docstring titles."""
    allowed = set(module_filter) if module_filter is not None else None
    modules: dict[str, _Module] = {}
    result = EntityDocMapping()
    for root in sorted(Path(r) for r in source_roots):
        for name, path, is_pkg in _module_files(root):
            if allowed is not None and name.split(".")[0] not in allowed:
                continue
            if name in modules:
                log.warning("module %s already crawled from %s; skipping %s", name, modules[name].path, path)
                continue
            try:
                tree = ast.parse(path.read_text("utf-8", errors="replace"))
            except (SyntaxError, ValueError) as exc:
                log.warning("skipping %s: %s", path, exc)
                result.crawl_log.append({"source_path": str(path), "error": str(exc)})
                continue
            mod = _Module(name, str(path), is_pkg)
            _scan_module(mod, tree)
            modules[name] = mod

    crawler = _Crawler(modules)
    public_paths: dict[int, tuple[_Entity, list[str]]] = {}
    for name in sorted(modules):
        if any(is_private(p) for p in name.split(".")):
            continue
        for export, ents in sorted(crawler.namespace(name).items()):
            for ent in ents:
                slot = public_paths.setdefault(id(ent), (ent, []))
                slot[1].append(_fqpn(name, export, ent))

    for ent, paths in sorted(public_paths.values(), key=lambda ep: (ep[0].source_path, ep[0].qualname)):
        documented = ent.title is not None
        result.visited += 1
        result.documented += documented
        result.crawl_log.append({"source_path": ent.source_path, "qualname": ".".join(ent.qualname),
                                 "fqpns": sorted(paths), "documented": documented})
        if not documented:
            continue
        for fqpn in paths:
            prev = result.sources.get(fqpn)
            if prev is not None and prev != ent.source_path:
                result.collisions.append(fqpn)
                log.info("duplicate FQPN %s in %s and %s", fqpn, prev, ent.source_path)
                if prev <= ent.source_path:
                    continue
            result.entries[fqpn] = ent.title
            result.sources[fqpn] = ent.source_path
            result.kinds[fqpn] = ent.kind
    return result
