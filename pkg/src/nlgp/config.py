"""Flat ``key = value`` pipeline configuration."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

_SECTION = "nlgp"
VARIANTS = ("natural", "docstring", "nocomment")


class ConfigInvalid(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class PipelineConfig:
    """Every pipeline knob; relative paths resolve against the config file."""

    manifest: str = ""
    output_dir: str = "out"
    source_roots: str = ""
    mapping_file: str = ""
    vocab_file: str = ""
    merges_file: str = ""
    annotations: str = ""
    ratings: str = ""
    split_ratio: float = 0.9
    injection_rate: float = 0.2
    strip_comments: bool = True
    beam_width: int = 3
    min_tokens: int = 10
    max_tokens: int = 150
    context_length: int = 700
    top_modules: int = 250
    vocab_size: int = 8000
    ngram_order: int = 6
    max_intent_tokens: int = 10
    sample_n: int = 0
    models: str = ",".join(VARIANTS)
    call_filter: bool = True
    record_latency: bool = False
    seed: int = 0

    @property
    def model_list(self) -> list[str]:
        return [m.strip() for m in self.models.split(",") if m.strip()]

    @property
    def root_list(self) -> list[str]:
        return [r.strip() for r in self.source_roots.split(",") if r.strip()]

    def digest(self) -> str:
        """Hash of the knob values; independent of key order in the file."""
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def sub_seed(self, stage: str) -> int:
        digest = hashlib.sha256(f"{self.seed}\0{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "big")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def _convert(name: str, kind: type, raw: str, problems: list[str]):
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except (KeyError, ValueError):
        problems.append(f"{name}: cannot read {raw!r} as {kind.__name__}")
        return None
    return raw


_TYPES = {"str": str, "int": int, "float": float, "bool": bool}


def check(cfg: PipelineConfig) -> list[str]:
    p = []
    if not 0 < cfg.split_ratio < 1:
        p.append("split_ratio must lie in (0, 1)")
    if not 0 <= cfg.injection_rate <= 1:
        p.append("injection_rate must lie in [0, 1]")
    if cfg.beam_width < 1:
        p.append("beam_width must be >= 1")
    if cfg.min_tokens < 1:
        p.append("min_tokens must be >= 1")
    if cfg.min_tokens > cfg.max_tokens:
        p.append("min_tokens must be <= max_tokens")
    if cfg.context_length < 2:
        p.append("context_length must be >= 2")
    if cfg.top_modules < 1:
        p.append("top_modules must be >= 1")
    if cfg.vocab_size < 256 + 4:
        p.append("vocab_size must cover the 256 byte tokens and 4 special tokens")
    if cfg.ngram_order < 1:
        p.append("ngram_order must be >= 1")
    if cfg.max_intent_tokens < 1:
        p.append("max_intent_tokens must be >= 1")
    if cfg.sample_n < 0:
        p.append("sample_n must be >= 0 (0 keeps every candidate)")
    unknown = [m for m in cfg.model_list if m not in VARIANTS]
    if unknown or not cfg.model_list:
        p.append(f"models must be a non-empty subset of {','.join(VARIANTS)}")
    if bool(cfg.vocab_file) != bool(cfg.merges_file):
        p.append("vocab_file and merges_file go together")
    return p


def parse_config(text: str, base_dir: str | Path = ".") -> PipelineConfig:
    """Parse and validate; raises ConfigInvalid listing every problem found."""
    parser = configparser.ConfigParser(strict=True, interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, delimiters=("=",))
    parser.optionxform = str
    problems: list[str] = []
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigInvalid([f"duplicate key {exc.option!r}"]) from None
    except configparser.Error as exc:
        raise ConfigInvalid([f"unreadable config: {exc.message.splitlines()[0]}"]) from None
    if len(parser.sections()) != 1:
        problems.append("sections are not allowed; use flat key = value lines")
    known = {f.name: f for f in fields(PipelineConfig)}
    values = {}
    for key, raw in parser.items(_SECTION):
        if key not in known:
            problems.append(f"unknown key {key!r}")
            continue
        kind = _TYPES[known[key].type] if isinstance(known[key].type, str) else known[key].type
        v = _convert(key, kind, raw, problems)
        if v is not None:
            values[key] = v
    base = Path(base_dir)
    for key in ("manifest", "output_dir", "mapping_file", "vocab_file", "merges_file", "annotations", "ratings"):
        if values.get(key):
            values[key] = str((base / values[key]).resolve()) if not Path(values[key]).is_absolute() else values[key]
    if values.get("source_roots"):
        values["source_roots"] = ",".join(
            str((base / r.strip()).resolve()) for r in values["source_roots"].split(",") if r.strip())
    cfg = PipelineConfig(**values)
    problems += check(cfg)
    if problems:
        raise ConfigInvalid(problems)
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise ConfigInvalid([f"cannot read {path}: {exc.strerror}"]) from None
    return parse_config(text, path.parent)
