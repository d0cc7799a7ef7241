"""Benchmark and prediction records plus JSON-lines helpers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator


class MalformedRecord(ValueError):
    """An input record that cannot be read as the expected type."""


@dataclass
class BenchmarkCase:
    id: str
    context: str
    intent: str
    target: str
    provenance: dict = field(default_factory=dict)


@dataclass
class PredictionRecord:
    id: str
    prediction: str
    score: float | None = None
    latency_ms: float = 0.0
    backend_id: str = ""
    alternatives: list[str] = field(default_factory=list)
    n_tokens: int = 0
    error: str | None = None


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def write_jsonl(path: str | Path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if not isinstance(rec, dict):
                rec = asdict(rec)
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _from_dict(cls, rec: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in rec.items() if k in names})


def load_benchmark(path: str | Path) -> list[BenchmarkCase]:
    return [_from_dict(BenchmarkCase, r) for r in read_jsonl(path)]


def load_predictions(path: str | Path) -> list[PredictionRecord]:
    return [_from_dict(PredictionRecord, r) for r in read_jsonl(path)]


# Field aliases accepted when importing externally published benchmark dumps.
RELEASED_ALIASES = {
    "id": ("id", "case_id", "task_id", "uid"),
    "context": ("context", "code_context", "c"),
    "intent": ("intent", "query", "nl", "i"),
    "target": ("target", "target_code", "code", "t"),
}


def _pick(rec: dict, names: tuple[str, ...]):
    for n in names:
        if n in rec:
            return rec[n]
    return None


def read_released_benchmark(path: str | Path) -> list[BenchmarkCase]:
    """Read an externally published benchmark (JSON list, JSON object of records, or JSON lines).

    Field names are matched through ``RELEASED_ALIASES``; list-valued code
    fields are joined with newlines.
    """
    path = Path(path)
    text = path.read_text("utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        records = json.loads(text)
    elif stripped.startswith("{") and "\n{" not in stripped:
        data = json.loads(text)
        records = list(data.values()) if all(isinstance(v, dict) for v in data.values()) else [data]
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    cases = []
    for n, rec in enumerate(records):
        vals = {}
        for key, names in RELEASED_ALIASES.items():
            v = _pick(rec, names)
            if isinstance(v, list):
                v = "\n".join(v)
            vals[key] = v
        if vals["context"] is None or vals["intent"] is None or vals["target"] is None:
            raise MalformedRecord(f"{path}: record {n} lacks context/intent/target fields")
        cases.append(BenchmarkCase(str(vals["id"] if vals["id"] is not None else n), vals["context"],
                                   vals["intent"], vals["target"], {"source": str(path)}))
    if not cases:
        raise MalformedRecord(f"{path}: no benchmark records")
    return cases
