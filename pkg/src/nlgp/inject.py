"""Call-site resolution and docstring-comment injection."""

from __future__ import annotations

import ast
import builtins
import hashlib
import random
from dataclasses import dataclass, field, replace
from typing import Iterator

from nlgp.corpus import CODE, ScriptDoc, ScriptLine, analysis_source, comment, place_markers, strip_comments
from nlgp.docmap import EntityDocMapping

BUILTIN_NAMES = frozenset(n for n in dir(builtins) if not n.startswith("_"))


class ParseError(ValueError):
    pass


@dataclass
class ResolutionEnv:
    alias_to_module: dict[str, str] = field(default_factory=dict)
    name_to_fqpn: dict[str, str] = field(default_factory=dict)
    var_to_instance_fqpn: dict[str, str] = field(default_factory=dict)
    local_names: set[str] = field(default_factory=set)

    def forget(self, name: str) -> None:
        self.alias_to_module.pop(name, None)
        self.name_to_fqpn.pop(name, None)
        self.var_to_instance_fqpn.pop(name, None)
        self.local_names.add(name)


@dataclass
class CallSite:
    file: str
    statement_line: int
    callee_text: str
    resolved_fqpn: str | None
    enclosing_statement_first_line: int
    decorated: bool = False

    @property
    def resolved(self) -> bool:
        return self.resolved_fqpn is not None


@dataclass
class ResolutionReport:
    visited: int = 0
    resolved: int = 0
    mapped: int = 0

    @property
    def resolution_rate(self) -> float:
        return self.resolved / self.visited if self.visited else 0.0

    @property
    def mapped_rate(self) -> float:
        return self.mapped / self.visited if self.visited else 0.0

    def add(self, other: "ResolutionReport") -> None:
        self.visited += other.visited
        self.resolved += other.resolved
        self.mapped += other.mapped

    def as_dict(self) -> dict:
        return {"visited": self.visited, "resolved": self.resolved, "mapped": self.mapped,
                "resolution_rate": self.resolution_rate, "mapped_rate": self.mapped_rate}


def _dotted(node: ast.expr) -> list[str] | None:
    parts = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if not isinstance(node, ast.Name):
        return None
    parts.append(node.id)
    return parts[::-1]


def _calls_preorder(node: ast.AST) -> Iterator[ast.Call]:
    """Calls inside ``node`` in pre-order, outermost first; nested scopes skipped."""
    if isinstance(node, ast.Call):
        yield node
    for child in ast.iter_child_nodes(node):
        if isinstance(child, (ast.stmt, ast.Lambda)):
            continue
        yield from _calls_preorder(child)


def _header_exprs(stmt: ast.stmt) -> list[ast.AST]:
    """Expressions evaluated by the statement itself, excluding nested bodies."""
    if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef)):
        return [*stmt.decorator_list, *stmt.args.defaults, *(d for d in stmt.args.kw_defaults if d)]
    if isinstance(stmt, ast.ClassDef):
        return [*stmt.decorator_list, *stmt.bases, *stmt.keywords]
    if isinstance(stmt, (ast.For, ast.AsyncFor)):
        return [stmt.target, stmt.iter]
    if isinstance(stmt, (ast.While, ast.If)):
        return [stmt.test]
    if isinstance(stmt, (ast.With, ast.AsyncWith)):
        return list(stmt.items)
    if isinstance(stmt, ast.Try):
        return [h.type for h in stmt.handlers if h.type]
    if hasattr(ast, "Match") and isinstance(stmt, ast.Match):
        return [stmt.subject]
    return [stmt]


def _bodies(stmt: ast.stmt) -> list[list[ast.stmt]]:
    out = []
    for name in ("body", "orelse", "finalbody"):
        body = getattr(stmt, name, None)
        if isinstance(body, list) and body and isinstance(body[0], ast.stmt):
            out.append(body)
    for h in getattr(stmt, "handlers", []) or []:
        out.append(h.body)
    for case in getattr(stmt, "cases", []) or []:
        out.append(case.body)
    return out


class Resolver:
    """Flow-sensitive (across statements) intra-file call resolver."""

    def __init__(self, mapping: EntityDocMapping, path: str = ""):
        self.mapping = mapping
        self.path = path
        self.env = ResolutionEnv()
        self.sites: list[CallSite] = []

    def _fqpn_for_path(self, parts: list[str]) -> str:
        if len(parts) > 1:
            cls = ".".join(parts[:-1]) + "()"
            if cls in self.mapping.entries and self.mapping.is_class(cls):
                return f"{cls}.{parts[-1]}()"
        return ".".join(parts) + "()"

    def resolve_callee(self, func: ast.expr) -> str | None:
        parts = _dotted(func)
        if parts is None:
            return None
        head, rest = parts[0], parts[1:]
        env = self.env
        if head in env.var_to_instance_fqpn:
            if len(rest) != 1:
                return None
            return f"{env.var_to_instance_fqpn[head]}().{rest[0]}()"
        if head in env.name_to_fqpn:
            return self._fqpn_for_path(env.name_to_fqpn[head].split(".") + rest)
        if head in env.alias_to_module:
            if not rest:
                return None
            return self._fqpn_for_path(env.alias_to_module[head].split(".") + rest)
        if head in BUILTIN_NAMES and head not in env.local_names:
            return self._fqpn_for_path(["builtins", head] + rest)
        return None

    def _bind(self, stmt: ast.stmt) -> None:
        env = self.env
        if isinstance(stmt, ast.Import):
            for a in stmt.names:
                if a.asname:
                    env.forget(a.asname)
                    env.alias_to_module[a.asname] = a.name
                    env.local_names.discard(a.asname)
                else:
                    root = a.name.split(".")[0]
                    env.forget(root)
                    env.alias_to_module[root] = root
                    env.local_names.discard(root)
            return
        if isinstance(stmt, ast.ImportFrom):
            if stmt.level or not stmt.module:
                for a in stmt.names:
                    env.forget(a.asname or a.name)
                return
            for a in stmt.names:
                if a.name == "*":
                    continue
                local = a.asname or a.name
                env.forget(local)
                env.name_to_fqpn[local] = f"{stmt.module}.{a.name}"
                env.local_names.discard(local)
            return
        if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            env.forget(stmt.name)
            return
        if isinstance(stmt, ast.Assign):
            instance = None
            if isinstance(stmt.value, ast.Call):
                fqpn = self.resolve_callee(stmt.value.func)
                if fqpn and fqpn.count("()") == 1 and self.mapping.is_class(fqpn):
                    instance = fqpn[:-2]
            for target in stmt.targets:
                for name in _assigned_names(target):
                    env.forget(name)
                if instance and isinstance(target, ast.Name):
                    env.var_to_instance_fqpn[target.id] = instance
            return
        for root in _header_exprs(stmt) if _bodies(stmt) else [stmt]:
            for sub in ast.walk(root):
                if isinstance(sub, ast.Name) and isinstance(sub.ctx, ast.Store):
                    env.forget(sub.id)

    def visit_block(self, body: list[ast.stmt]) -> None:
        for stmt in body:
            first = min([stmt.lineno] + [d.lineno for d in getattr(stmt, "decorator_list", [])])
            decorated = bool(getattr(stmt, "decorator_list", None))
            for expr in _header_exprs(stmt):
                if expr is None:
                    continue
                for call in _calls_preorder(expr):
                    self.sites.append(CallSite(
                        file=self.path,
                        statement_line=stmt.lineno,
                        callee_text=ast.unparse(call.func),
                        resolved_fqpn=self.resolve_callee(call.func),
                        enclosing_statement_first_line=first,
                        decorated=decorated,
                    ))
            if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
                self._bind(stmt)
                saved = self.env
                self.env = _copy_env(saved)
                for body in _bodies(stmt):
                    self.visit_block(body)
                self.env = saved
                continue
            self._bind(stmt)
            for body in _bodies(stmt):
                self.visit_block(body)


def _copy_env(env: ResolutionEnv) -> ResolutionEnv:
    return ResolutionEnv(dict(env.alias_to_module), dict(env.name_to_fqpn),
                         dict(env.var_to_instance_fqpn), set(env.local_names))


def _assigned_names(target: ast.expr) -> Iterator[str]:
    for node in ast.walk(target):
        if isinstance(node, ast.Name) and isinstance(node.ctx, ast.Store):
            yield node.id


def resolve_source(src: str, mapping: EntityDocMapping, path: str = "") -> list[CallSite]:
    try:
        tree = ast.parse(src)
    except (SyntaxError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    r = Resolver(mapping, path)
    r.visit_block(tree.body)
    return r.sites


def resolve_calls(script: ScriptDoc, mapping: EntityDocMapping) -> list[CallSite]:
    """Visit every call in the script; line numbers are 1-based script line indices."""
    return resolve_source(analysis_source(script), mapping, script.source_path)


def report(sites: list[CallSite], mapping: EntityDocMapping) -> ResolutionReport:
    return ResolutionReport(
        visited=len(sites),
        resolved=sum(s.resolved for s in sites),
        mapped=sum(s.resolved_fqpn in mapping.entries for s in sites if s.resolved),
    )


def script_rng(seed: int, path: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}\0{path}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def sample_sites(sites: list[CallSite], mapping: EntityDocMapping, rate: float, rng: random.Random) -> list[CallSite]:
    """Independent Bernoulli(rate) draw for every site that has a mapping entry."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    chosen = []
    for site in sites:
        if site.resolved_fqpn in mapping.entries and rng.random() < rate:
            chosen.append(site)
    return chosen


def inject_comments(
    script: ScriptDoc,
    sites: list[CallSite],
    mapping: EntityDocMapping,
    rate: float,
    seed: int,
) -> ScriptDoc:
    """Insert ``# <title>`` above the statements enclosing sampled call sites."""
    chosen = sample_sites(sites, mapping, rate, script_rng(seed, script.source_path))
    if not chosen:
        return script
    above: dict[int, list[ScriptLine]] = {}
    for site in chosen:
        idx = site.enclosing_statement_first_line - 1
        line = script.lines[idx]
        indent = line.text[: len(line.text) - len(line.text.lstrip())] if line.kind == CODE else line.indent
        above.setdefault(idx, []).append(comment(mapping.entries[site.resolved_fqpn], indent))
    lines: list[ScriptLine] = []
    for i, ln in enumerate(script.lines):
        lines.extend(above.get(i, ()))
        lines.append(ln)
    return replace(script, lines=place_markers(lines))


def inject_script(
    script: ScriptDoc,
    mapping: EntityDocMapping,
    rate: float,
    seed: int,
    strip_existing: bool = False,
) -> tuple[ScriptDoc, ResolutionReport]:
    if strip_existing:
        script = strip_comments(script)
    sites = resolve_calls(script, mapping)
    return inject_comments(script, sites, mapping, rate, seed), report(sites, mapping)
