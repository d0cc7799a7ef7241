"""Pipeline stages over an output directory, with atomic writes and a run log."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

from nlgp import __version__, benchmine, corpus, docmap, inject, metrics, predictor, special
from nlgp.bpe import Tokenizer, train_bpe
from nlgp.config import PipelineConfig
from nlgp.records import load_benchmark, load_predictions, read_jsonl, write_jsonl

log = logging.getLogger(__name__)

RUN_LOG = "run_log.jsonl"


class MissingInput(FileNotFoundError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    finished: float = 0.0
    tool_version: str = __version__
    details: dict = field(default_factory=dict)


# --- files ------------------------------------------------------------------------


def digest(path: Path) -> str:
    """sha256 of a file, or of the sorted (relative path, file digest) list of a directory."""
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode() + b"\0" + digest(p).encode() + b"\n")
    else:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def _remove(p: Path) -> None:
    if p.is_dir() and not p.is_symlink():
        shutil.rmtree(p)
    elif p.exists() or p.is_symlink():
        p.unlink()


@contextmanager
def atomic_path(target: Path, is_dir: bool = False) -> Iterator[Path]:
    """Yield a temporary sibling path that replaces ``target`` only on success."""
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(f".{target.name}.tmp-{os.getpid()}")
    _remove(tmp)
    if is_dir:
        tmp.mkdir()
    try:
        yield tmp
        if is_dir and target.exists():
            old = target.with_name(f".{target.name}.old-{os.getpid()}")
            _remove(old)
            os.replace(target, old)
            try:
                os.replace(tmp, target)
            except BaseException:
                os.replace(old, target)  # put the previous output back
                raise
            _remove(old)
        else:
            os.replace(tmp, target)
    except BaseException:
        _remove(tmp)
        raise


def write_scripts(out_dir: Path, scripts: list[corpus.ScriptDoc]) -> None:
    index = []
    used: set[str] = set()
    for s in scripts:
        stem = Path(s.source_path).with_suffix("").as_posix().replace("..", "_").lstrip("/")
        rel = f"{stem}.py"
        n = 1
        while rel in used:
            n += 1
            rel = f"{stem}-{n}.py"
        used.add(rel)
        dest = out_dir / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(corpus.render_script(s), "utf-8")
        index.append({"file": rel, "source_path": s.source_path, "project": s.project, "split": s.split})
    write_jsonl(out_dir / "index.jsonl", index)


def read_scripts(script_dir: Path) -> list[corpus.ScriptDoc]:
    index = script_dir / "index.jsonl"
    if not index.exists():
        raise MissingInput(f"{index} not found")
    out = []
    for rec in read_jsonl(index):
        text = (script_dir / rec["file"]).read_text("utf-8")
        doc = corpus.parse_script(text, rec["source_path"], rec["project"])
        out.append(replace(doc, split=rec.get("split", "unassigned")))
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", "utf-8")


# --- stage context ----------------------------------------------------------------


class Workspace:
    """Declared file locations under the output directory."""

    def __init__(self, cfg: PipelineConfig, jobs: int = 1):
        self.cfg = cfg
        self.jobs = jobs
        self.root = Path(cfg.output_dir)

    scripts = property(lambda self: self.root / "scripts")
    split = property(lambda self: self.root / "split.json")
    modfreq = property(lambda self: self.root / "modfreq.tsv")
    mapping = property(lambda self: self.root / "mapping.jsonl")
    docstring = property(lambda self: self.root / "docstring")
    corpus = property(lambda self: self.root / "corpus")
    tokenizer = property(lambda self: self.root / "tokenizer")
    models = property(lambda self: self.root / "models")
    bench = property(lambda self: self.root / "bench")
    predictions = property(lambda self: self.root / "predictions")
    report = property(lambda self: self.root / "report")

    def need(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise MissingInput(f"required input {p} not found (run the producing stage first)")

    def split_scripts(self) -> tuple[list[corpus.ScriptDoc], list[corpus.ScriptDoc]]:
        self.need(self.scripts, self.split)
        split = json.loads(self.split.read_text("utf-8"))
        train_p = set(split["train_projects"])
        train, evals = [], []
        for s in read_scripts(self.scripts):
            if s.project in train_p:
                train.append(replace(s, split="train"))
            else:
                evals.append(replace(s, split="eval"))
        return train, evals


# --- stages -----------------------------------------------------------------------


def ingest_corpus(manifest: str | Path) -> tuple[list[corpus.ScriptDoc], dict]:
    """Read a manifest, drop forks and unusable notebooks, convert the rest to scripts."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise MissingInput(f"manifest {manifest} not found")
    base = manifest.parent.resolve()
    projects = corpus.load_manifest(manifest)
    kept = corpus.filter_forks(projects)
    scripts, skipped = [], []
    for p in kept:
        for nb_path in p.notebook_paths:
            full = Path(nb_path).resolve()
            rel = full.relative_to(base).as_posix() if full.is_relative_to(base) else str(nb_path)
            try:
                nb = corpus.read_notebook(nb_path, p.project_name)
            except FileNotFoundError:
                skipped.append({"path": rel, "reason": "missing"})
                continue
            except (corpus.NonPythonNotebook, corpus.MalformedNotebook) as exc:
                skipped.append({"path": rel, "reason": type(exc).__name__})
                continue
            s = corpus.notebook_to_script(replace(nb, source_path=rel))
            scripts.append(replace(s, meta={"stars": p.star_count, "license": p.license_id}))
    report = {"projects_listed": len(projects), "projects_kept": len(kept),
              "forks_dropped": len(projects) - len(kept), "scripts": len(scripts), "skipped": skipped}
    return scripts, report


def save_ingest(out_dir: Path, scripts: list[corpus.ScriptDoc], report: dict) -> None:
    with atomic_path(out_dir, is_dir=True) as tmp:
        write_scripts(tmp, scripts)
        _write_json(tmp / "ingest_report.json", report)


def stage_ingest(ws: Workspace) -> dict:
    if not ws.cfg.manifest:
        raise MissingInput("manifest is not set")
    scripts, report = ingest_corpus(ws.cfg.manifest)
    save_ingest(ws.scripts, scripts, report)
    return {"scripts": len(scripts), "skipped": len(report["skipped"])}


def stage_split(ws: Workspace) -> dict:
    ws.need(ws.scripts)
    scripts = read_scripts(ws.scripts)
    train, evals = corpus.split_corpus(scripts, ws.cfg.split_ratio, ws.cfg.sub_seed("split"))
    data = {"train_projects": sorted({s.project for s in train}),
            "eval_projects": sorted({s.project for s in evals}),
            "train_scripts": len(train), "eval_scripts": len(evals)}
    with atomic_path(ws.split) as tmp:
        _write_json(tmp, data)
    return {"train_scripts": len(train), "eval_scripts": len(evals)}


def stage_modfreq(ws: Workspace) -> dict:
    train, _ = ws.split_scripts()
    freq = docmap.count_root_modules(train)
    top = freq.top(ws.cfg.top_modules)
    with atomic_path(ws.modfreq) as tmp:
        tmp.write_text("".join(f"{m}\t{c}\n" for m, c in top), "utf-8")
    return {"modules": len(top), "parse_errors": len(freq.errors)}


def read_modfreq(path: Path) -> list[str]:
    return [ln.split("\t")[0] for ln in path.read_text("utf-8").splitlines() if ln.strip()]


def stage_docmap(ws: Workspace) -> dict:
    cfg = ws.cfg
    if cfg.mapping_file:
        ws.need(Path(cfg.mapping_file))
        mapping = docmap.EntityDocMapping.load(cfg.mapping_file)
    elif cfg.root_list:
        ws.need(ws.modfreq, *map(Path, cfg.root_list))
        mapping = docmap.crawl_docstrings(cfg.root_list, read_modfreq(ws.modfreq))
    else:
        raise MissingInput("docmap needs mapping_file or source_roots")
    with atomic_path(ws.mapping) as tmp:
        mapping.dump(tmp)
    return {"entries": len(mapping.entries), "coverage": mapping.coverage}


def stage_inject(ws: Workspace) -> dict:
    ws.need(ws.mapping)
    train, _ = ws.split_scripts()
    mapping = docmap.EntityDocMapping.load(ws.mapping)
    seed = ws.cfg.sub_seed("inject")
    out, total, failed = [], inject.ResolutionReport(), []
    for s in train:
        try:
            doc, rep = inject.inject_script(s, mapping, ws.cfg.injection_rate, seed, ws.cfg.strip_comments)
        except inject.ParseError:
            doc = corpus.strip_comments(s) if ws.cfg.strip_comments else s
            failed.append(s.source_path)
        else:
            total.add(rep)
        out.append(doc)
    with atomic_path(ws.docstring, is_dir=True) as tmp:
        write_scripts(tmp, out)
        _write_json(tmp / "inject_report.json", {**total.as_dict(), "unparsed_scripts": failed})
    return total.as_dict()


def variant_scripts(ws: Workspace, variant: str) -> list[corpus.ScriptDoc]:
    train, _ = ws.split_scripts()
    if variant == "natural":
        return train
    if variant == "nocomment":
        return [corpus.strip_comments(s) for s in train]
    ws.need(ws.docstring)
    return read_scripts(ws.docstring)


def stage_concat(ws: Workspace) -> dict:
    train, _ = ws.split_scripts()
    sizes = {}
    with atomic_path(ws.corpus, is_dir=True) as tmp:
        for v in ws.cfg.model_list:
            data = corpus.concatenate_training_file(variant_scripts(ws, v))
            (tmp / f"train_{v}.txt").write_bytes(data)
            sizes[v] = len(data)
        (tmp / "train_plain.txt").write_text("".join(corpus.render_plain(s) for s in train), "utf-8")
    return {"bytes": sizes}


def load_tokenizer(ws: Workspace) -> Tokenizer:
    ws.need(ws.tokenizer)
    return Tokenizer.from_dir(ws.tokenizer)


def stage_bpe_train(ws: Workspace) -> dict:
    cfg = ws.cfg
    if cfg.vocab_file:
        ws.need(Path(cfg.vocab_file), Path(cfg.merges_file))
        tok = Tokenizer.from_files(cfg.vocab_file, cfg.merges_file)
    else:
        src = ws.corpus / "train_natural.txt"
        ws.need(src)
        tok = train_bpe(src.read_bytes(), cfg.vocab_size)
    with atomic_path(ws.tokenizer, is_dir=True) as tmp:
        tok.save(tmp)
    return {"vocab": len(tok.vocab), "merges": len(tok.merges)}


def stage_train_lm(ws: Workspace) -> dict:
    tok = load_tokenizer(ws)
    sizes = {}
    with atomic_path(ws.models, is_dir=True) as tmp:
        for v in ws.cfg.model_list:
            src = ws.corpus / f"train_{v}.txt"
            ws.need(src)
            ids = tok.encode(src.read_bytes()).ids
            model = predictor.train_ngram(ids, ws.cfg.ngram_order, len(tok.vocab), tok)
            model.backend_id = v
            model.save(tmp / f"{v}.json.gz")
            sizes[v] = len(ids)
    return {"tokens": sizes}


def mine_benchmark(ws: Workspace) -> tuple[list[benchmine.CandidateCase], list[benchmine.CandidateCase]]:
    _, evals = ws.split_scripts()
    plain = ws.corpus / "train_plain.txt"
    ws.need(plain)
    cfg = ws.cfg
    cands = benchmine.mine_candidates(evals, cfg.max_intent_tokens, cfg.sample_n or None, cfg.sub_seed("bench"))
    return benchmine.overlap_filter(cands, plain.read_text("utf-8"))


def stage_bench(ws: Workspace) -> dict:
    kept, dropped = mine_benchmark(ws)
    by_id = {c.id: c for c in kept}
    details: dict = {"candidates": len(kept) + len(dropped), "overlap_dropped": len(dropped)}
    if ws.cfg.annotations:
        ws.need(Path(ws.cfg.annotations))
        records = [benchmine.AnnotationRecord.from_dict(r) for r in read_jsonl(ws.cfg.annotations)]
        records = [r for r in records if r.case_id in by_id]
        accepted = benchmine.curation_accept(records)
        details["fleiss_kappa"] = benchmine.fleiss_kappa(benchmine.relevance_matrix(records)) if records else None
    else:
        accepted = benchmine.auto_accept(kept)
    cases = [benchmine.postprocess(by_id[cid], acc) for cid, acc in sorted(accepted.items())]
    details["accepted"] = len(cases)
    with atomic_path(ws.bench, is_dir=True) as tmp:
        write_jsonl(tmp / "candidates.jsonl", kept)
        write_jsonl(tmp / "dropped.jsonl", dropped)
        write_jsonl(tmp / "acceptance.jsonl", [asdict(a) for _, a in sorted(accepted.items())])
        write_jsonl(tmp / "benchmark.jsonl", cases)
        if cases:
            _write_json(tmp / "stats.json", asdict(benchmine.benchmark_stats(cases)))
            freq = benchmine.module_distribution(cases)
            (tmp / "modules.tsv").write_text(
                "".join(f"{m}\t{c}\n" for m, c in freq.top(ws.cfg.top_modules, exclude_stdlib=False)), "utf-8")
        _write_json(tmp / "bench_report.json", details)
    return details


def decoder_config(cfg: PipelineConfig, tok: Tokenizer) -> predictor.DecoderConfig:
    return predictor.DecoderConfig(cfg.beam_width, cfg.min_tokens, cfg.max_tokens, tok.token_id(special.CELL))


def stage_predict(ws: Workspace) -> dict:
    bench = ws.bench / "benchmark.jsonl"
    ws.need(bench, ws.models)
    tok = load_tokenizer(ws)
    cases = load_benchmark(bench)
    dcfg = decoder_config(ws.cfg, tok)
    errors = {}
    with atomic_path(ws.predictions, is_dir=True) as tmp:
        for v in ws.cfg.model_list:
            model = predictor.NgramModel.load(ws.models / f"{v}.json.gz")
            recs = predictor.predict_batch(cases, model, tok, dcfg, ws.cfg.context_length, ws.jobs,
                                           record_latency=ws.cfg.record_latency)
            errors[v] = sum(r.error is not None for r in recs)
            write_jsonl(tmp / f"{v}.jsonl", recs)
    return {"cases": len(cases), "errors": errors}


def stage_score(ws: Workspace) -> dict:
    bench = ws.bench / "benchmark.jsonl"
    ws.need(bench, ws.predictions)
    preds = [p for v in ws.cfg.model_list for p in load_predictions(ws.predictions / f"{v}.jsonl")]
    ratings = []
    if ws.cfg.ratings:
        ws.need(Path(ws.cfg.ratings))
        ratings = [metrics.RatingRecord.from_dict(r) for r in read_jsonl(ws.cfg.ratings)]
    table = metrics.score_report(preds, load_benchmark(bench), ratings, ws.cfg.call_filter)
    with atomic_path(ws.report, is_dir=True) as tmp:
        table.write(tmp)
    return {"rows": len(table.rows), "flagged": len(table.flagged)}


STAGES: dict[str, tuple[Callable[[Workspace], dict], Callable[[Workspace], list[Path]], Callable[[Workspace], list[Path]]]] = {
    "ingest": (stage_ingest, lambda w: [Path(w.cfg.manifest)], lambda w: [w.scripts]),
    "split": (stage_split, lambda w: [w.scripts], lambda w: [w.split]),
    "modfreq": (stage_modfreq, lambda w: [w.scripts, w.split], lambda w: [w.modfreq]),
    "docmap": (stage_docmap, lambda w: [w.modfreq], lambda w: [w.mapping]),
    "inject": (stage_inject, lambda w: [w.scripts, w.split, w.mapping], lambda w: [w.docstring]),
    "concat": (stage_concat, lambda w: [w.scripts, w.split], lambda w: [w.corpus]),
    "bpe-train": (stage_bpe_train, lambda w: [w.corpus], lambda w: [w.tokenizer]),
    "train-lm": (stage_train_lm, lambda w: [w.corpus, w.tokenizer], lambda w: [w.models]),
    "bench": (stage_bench, lambda w: [w.scripts, w.split, w.corpus], lambda w: [w.bench]),
    "predict": (stage_predict, lambda w: [w.bench, w.models, w.tokenizer], lambda w: [w.predictions]),
    "score": (stage_score, lambda w: [w.bench, w.predictions], lambda w: [w.report]),
}


def stage_order(cfg: PipelineConfig) -> list[str]:
    names = list(STAGES)
    if "docstring" not in cfg.model_list:
        names = [n for n in names if n not in ("modfreq", "docmap", "inject")]
    return names


def _digests(paths: list[Path], root: Path) -> dict[str, str]:
    out = {}
    for p in paths:
        if p.exists():
            key = p.relative_to(root).as_posix() if p.is_relative_to(root) else str(p)
            out[key] = digest(p)
    return out


def run_stage(name: str, ws: Workspace) -> RunManifest:
    if name not in STAGES:
        raise ValueError(f"unknown stage {name!r}")
    fn, inputs, outputs = STAGES[name]
    man = RunManifest(name, ws.cfg.digest(), started=time.time())
    man.inputs = _digests(inputs(ws), ws.root)
    try:
        man.details = fn(ws)
    except (MissingInput, StageFailure):
        raise
    except FileNotFoundError as exc:
        raise MissingInput(str(exc)) from exc
    except Exception as exc:
        log.exception("stage %s failed", name)
        raise StageFailure(name, f"{type(exc).__name__}: {exc}") from exc
    man.finished = time.time()
    man.outputs = _digests(outputs(ws), ws.root)
    ws.root.mkdir(parents=True, exist_ok=True)
    with open(ws.root / RUN_LOG, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(asdict(man), sort_keys=True) + "\n")
    return man


def run_all(ws: Workspace) -> list[RunManifest]:
    return [run_stage(n, ws) for n in stage_order(ws.cfg)]


def stage_outputs(ws: Workspace) -> list[Path]:
    return [p for n in stage_order(ws.cfg) for p in STAGES[n][2](ws)]
