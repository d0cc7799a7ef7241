"""Command-line entry point: ``nlgp <command>``.

Each command either works on explicit files or, when those are omitted,
runs the matching pipeline stage inside the configured output directory.
The config path comes from ``--config`` or the ``NLGP_CONFIG`` variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from dataclasses import asdict, replace
from pathlib import Path

from nlgp import __version__, benchmine, corpus, docmap, inject, metrics, predictor, special
from nlgp.bpe import Tokenizer, train_bpe
from nlgp.config import ConfigInvalid, PipelineConfig, load_config
from nlgp.pipeline import (
    MissingInput, StageFailure, Workspace, atomic_path, ingest_corpus, mine_benchmark, read_modfreq, read_scripts,
    run_all, run_stage, save_ingest, write_scripts,
)
from nlgp.records import MalformedRecord, load_benchmark, load_predictions, read_jsonl, read_released_benchmark, write_jsonl

log = logging.getLogger("nlgp")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_STAGE = 0, 2, 3, 4
CONFIG_ENV = "NLGP_CONFIG"


# --- helpers ----------------------------------------------------------------------


def _config(args) -> PipelineConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = load_config(path) if path else PipelineConfig()
    if getattr(args, "out_dir", None):
        cfg = replace(cfg, output_dir=str(Path(args.out_dir).resolve()))
    return cfg


def _workspace(args) -> Workspace:
    return Workspace(_config(args), args.jobs)


def _stage(args, name: str) -> int:
    man = run_stage(name, _workspace(args))
    print(json.dumps({"stage": name, **man.details}, sort_keys=True))
    return EXIT_OK


def _need(*paths) -> None:
    for p in paths:
        if p and not Path(p).exists():
            raise MissingInput(f"{p} not found")


def _split_scripts(script_dir: Path, split_file: str | None) -> list[corpus.ScriptDoc]:
    scripts = read_scripts(script_dir)
    if not split_file:
        return scripts
    train_p = set(json.loads(Path(split_file).read_text("utf-8"))["train_projects"])
    return [replace(s, split="train" if s.project in train_p else "eval") for s in scripts]


def _candidate(rec: dict) -> benchmine.CandidateCase:
    return benchmine.CandidateCase(**rec)


def _acceptance(rec: dict) -> benchmine.Acceptance:
    return benchmine.Acceptance(rec["case_id"], tuple(rec["span"]), rec.get("intent"), tuple(rec.get("pair", ("", ""))))


# --- commands ---------------------------------------------------------------------


def cmd_ingest(args) -> int:
    if not args.manifest:
        return _stage(args, "ingest")
    scripts, report = ingest_corpus(args.manifest)
    save_ingest(Path(args.out), scripts, report)
    print(json.dumps({"scripts": len(scripts), "skipped": len(report["skipped"])}))
    return EXIT_OK


def cmd_split(args) -> int:
    if not args.scripts:
        return _stage(args, "split")
    cfg = _config(args)
    ratio = args.ratio if args.ratio is not None else cfg.split_ratio
    seed = args.seed if args.seed is not None else cfg.sub_seed("split")
    train, evals = corpus.split_corpus(read_scripts(Path(args.scripts)), ratio, seed)
    data = {"train_projects": sorted({s.project for s in train}), "eval_projects": sorted({s.project for s in evals}),
            "train_scripts": len(train), "eval_scripts": len(evals)}
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    if args.out:
        with atomic_path(Path(args.out)) as tmp:
            tmp.write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_concat(args) -> int:
    if not args.scripts:
        return _stage(args, "concat")
    scripts = [s for s in _split_scripts(Path(args.scripts), args.split_file)
               if args.split == "all" or s.split == args.split]
    if args.strip_comments:
        scripts = [corpus.strip_comments(s) for s in scripts]
    data = "".join(map(corpus.render_plain, scripts)).encode() if args.plain else corpus.concatenate_training_file(scripts)
    with atomic_path(Path(args.out)) as tmp:
        tmp.write_bytes(data)
    print(json.dumps({"scripts": len(scripts), "bytes": len(data)}))
    return EXIT_OK


def cmd_bpe_train(args) -> int:
    if not args.corpus:
        return _stage(args, "bpe-train")
    _need(args.corpus)
    size = args.vocab_size or _config(args).vocab_size
    tok = train_bpe(Path(args.corpus).read_bytes(), size)
    with atomic_path(Path(args.out), is_dir=True) as tmp:
        tok.save(tmp)
    print(json.dumps({"vocab": len(tok.vocab), "merges": len(tok.merges)}))
    return EXIT_OK


def cmd_encode(args) -> int:
    if args.vocab and args.merges:
        tok = Tokenizer.from_files(args.vocab, args.merges)
    else:
        tok = Tokenizer.from_dir(args.tokenizer or _workspace(args).tokenizer)
    seq = tok.encode(args.text)
    print(json.dumps({"tokens": list(seq.tokens), "ids": list(seq.ids)}, ensure_ascii=False))
    return EXIT_OK


def cmd_docmap(args) -> int:
    if not args.roots:
        return _stage(args, "docmap")
    _need(*args.roots, args.modules)
    modules = read_modfreq(Path(args.modules)) if args.modules else None
    mapping = docmap.crawl_docstrings(args.roots, modules)
    with atomic_path(Path(args.out)) as tmp:
        mapping.dump(tmp)
    print(json.dumps({"entries": len(mapping.entries), "visited": mapping.visited,
                      "coverage": mapping.coverage, "collisions": len(mapping.collisions)}))
    return EXIT_OK


def cmd_modfreq(args) -> int:
    if not args.scripts:
        return _stage(args, "modfreq")
    scripts = [s for s in _split_scripts(Path(args.scripts), args.split_file)
               if not args.split_file or s.split == "train"]
    freq = docmap.count_root_modules(scripts)
    top = args.top or _config(args).top_modules
    text = "".join(f"{m}\t{c}\n" for m, c in freq.top(top))
    if args.out:
        with atomic_path(Path(args.out)) as tmp:
            tmp.write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inject(args) -> int:
    if not args.scripts:
        return _stage(args, "inject")
    _need(args.scripts, args.mapping)
    cfg = _config(args)
    rate = args.rate if args.rate is not None else cfg.injection_rate
    seed = args.seed if args.seed is not None else cfg.sub_seed("inject")
    mapping = docmap.EntityDocMapping.load(args.mapping)
    out, total = [], inject.ResolutionReport()
    for s in read_scripts(Path(args.scripts)):
        try:
            doc, rep = inject.inject_script(s, mapping, rate, seed, args.strip_comments)
            total.add(rep)
        except inject.ParseError as exc:
            log.warning("%s", exc)
            doc = corpus.strip_comments(s) if args.strip_comments else s
        out.append(doc)
    with atomic_path(Path(args.out), is_dir=True) as tmp:
        write_scripts(tmp, out)
        (tmp / "inject_report.json").write_text(json.dumps(total.as_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(total.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_train_lm(args) -> int:
    if not args.corpus:
        return _stage(args, "train-lm")
    _need(args.corpus, args.tokenizer)
    tok = Tokenizer.from_dir(args.tokenizer)
    ids = tok.encode(Path(args.corpus).read_bytes()).ids
    model = predictor.train_ngram(ids, args.order or _config(args).ngram_order, len(tok.vocab), tok)
    model.backend_id = args.backend_id
    with atomic_path(Path(args.out)) as tmp:
        model.save(tmp)
    print(json.dumps({"tokens": len(ids), "order": model.order}))
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.benchmark:
        return _stage(args, "predict")
    _need(args.benchmark)
    cfg = _config(args)
    if args.backend == "ngram":
        _need(args.model)
        backend = predictor.NgramModel.load(args.model)
        tok = backend.tokenizer or Tokenizer.from_dir(args.tokenizer)
    else:
        if not args.command:
            raise MissingInput("--command is required for the extern backend")
        tok = Tokenizer.from_dir(args.tokenizer or _workspace(args).tokenizer)
        backend = predictor.ExternBackend(shlex.split(args.command), args.backend_id or "extern")
    if args.backend_id:
        backend.backend_id = args.backend_id
    dcfg = predictor.DecoderConfig(
        args.beam or cfg.beam_width, args.min or cfg.min_tokens, args.max or cfg.max_tokens,
        tok.token_id(special.CELL))
    try:
        recs = predictor.predict_batch(load_benchmark(args.benchmark), backend, tok, dcfg,
                                       args.ctx or cfg.context_length, args.jobs, record_latency=args.latency)
    finally:
        if hasattr(backend, "close"):
            backend.close()
    if args.out:
        with atomic_path(Path(args.out)) as tmp:
            write_jsonl(tmp, recs)
    else:
        for r in recs:
            print(json.dumps(asdict(r), sort_keys=True, ensure_ascii=False))
    failed = sum(r.error is not None for r in recs)
    if failed:
        log.warning("%d of %d cases failed", failed, len(recs))
    return EXIT_OK


def cmd_score(args) -> int:
    if not args.pred:
        return _stage(args, "score")
    _need(*args.pred, args.bench, args.ratings)
    preds = [p for f in args.pred for p in load_predictions(f)]
    ratings = [metrics.RatingRecord.from_dict(r) for r in read_jsonl(args.ratings)] if args.ratings else []
    table = metrics.score_report(preds, load_benchmark(args.bench), ratings, args.call_filter, args.per_rater)
    if args.out:
        with atomic_path(Path(args.out), is_dir=True) as tmp:
            table.write(tmp)
    sys.stdout.write(table.to_tsv())
    return EXIT_OK


def cmd_report(args) -> int:
    report = Path(args.dir) if args.dir else _workspace(args).report
    _need(report / "report.tsv")
    sys.stdout.write((report / "report.tsv").read_text("utf-8"))
    flagged = json.loads((report / "report.json").read_text("utf-8")).get("flagged", [])
    if flagged:
        print(f"# {len(flagged)} case(s) where IoU and usefulness disagree by more than 1/3:")
        for f in flagged:
            print(f"#   {f['backend_id']} {f['case_id']}: iou={f['iou']:.3f} usefulness={f['usefulness']:.3f}")
    return EXIT_OK


def cmd_run_all(args) -> int:
    ws = _workspace(args)
    for man in run_all(ws):
        print(json.dumps({"stage": man.stage, **man.details}, sort_keys=True))
    return EXIT_OK


# bench subcommands


def cmd_bench(args) -> int:
    return BENCH[args.bench_cmd](args)


def bench_mine(args) -> int:
    if not args.scripts:
        ws = _workspace(args)
        kept, dropped = mine_benchmark(ws)
        print(json.dumps({"kept": len(kept), "dropped": len(dropped)}))
        return EXIT_OK
    cfg = _config(args)
    scripts = [s for s in _split_scripts(Path(args.scripts), args.split_file) if s.split != "train"]
    cands = benchmine.mine_candidates(scripts, args.max_tokens or cfg.max_intent_tokens, args.sample,
                                      args.seed if args.seed is not None else cfg.sub_seed("bench"))
    with atomic_path(Path(args.out)) as tmp:
        write_jsonl(tmp, cands)
    print(json.dumps({"candidates": len(cands)}))
    return EXIT_OK


def bench_filter(args) -> int:
    _need(args.candidates, args.train_corpus)
    cands = [_candidate(r) for r in read_jsonl(args.candidates)]
    kept, dropped = benchmine.overlap_filter(cands, Path(args.train_corpus).read_bytes())
    with atomic_path(Path(args.out)) as tmp:
        write_jsonl(tmp, kept)
    if args.dropped:
        with atomic_path(Path(args.dropped)) as tmp:
            write_jsonl(tmp, dropped)
    print(json.dumps({"kept": len(kept), "dropped": len(dropped)}))
    return EXIT_OK


def bench_accept(args) -> int:
    if args.annotations:
        _need(args.annotations)
        records = [benchmine.AnnotationRecord.from_dict(r) for r in read_jsonl(args.annotations)]
        accepted = benchmine.curation_accept(records)
        info = {"cases": len(benchmine.group_annotations(records)), "accepted": len(accepted),
                "fleiss_kappa": benchmine.fleiss_kappa(benchmine.relevance_matrix(records)) if records else None}
    else:
        _need(args.candidates)
        accepted = benchmine.auto_accept([_candidate(r) for r in read_jsonl(args.candidates)])
        info = {"accepted": len(accepted), "mode": "automatic spans"}
    with atomic_path(Path(args.out)) as tmp:
        write_jsonl(tmp, [asdict(a) for _, a in sorted(accepted.items())])
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def bench_post(args) -> int:
    _need(args.candidates, args.acceptance)
    cands = {c.id: c for c in map(_candidate, read_jsonl(args.candidates))}
    accepted = [_acceptance(r) for r in read_jsonl(args.acceptance)]
    missing = [a.case_id for a in accepted if a.case_id not in cands]
    if missing:
        raise MissingInput(f"accepted cases without candidates: {missing[:5]}")
    cases = [benchmine.postprocess(cands[a.case_id], a) for a in accepted]
    with atomic_path(Path(args.out)) as tmp:
        write_jsonl(tmp, cases)
    print(json.dumps({"cases": len(cases)}))
    return EXIT_OK


def _load_cases(args):
    _need(args.benchmark)
    return read_released_benchmark(args.benchmark) if args.released else load_benchmark(args.benchmark)


def bench_stats(args) -> int:
    print(json.dumps(asdict(benchmine.benchmark_stats(_load_cases(args))), sort_keys=True))
    return EXIT_OK


def bench_modules(args) -> int:
    freq = benchmine.module_distribution(_load_cases(args))
    for m, c in freq.top(args.top or _config(args).top_modules, exclude_stdlib=False):
        print(f"{m}\t{c}")
    for e in freq.errors:
        log.warning("unparsed target: %s", e)
    return EXIT_OK


BENCH = {"mine": bench_mine, "filter": bench_filter, "accept": bench_accept, "post": bench_post,
         "stats": bench_stats, "modules": bench_modules}


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"config file (default: ${CONFIG_ENV}, else built-in defaults)")
    common.add_argument("--out-dir", help="override output_dir from the config")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers where a stage supports them")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="nlgp", description="Notebook corpus, benchmark and evaluation toolchain.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("ingest", cmd_ingest, "notebooks -> cleaned scripts")
    p.add_argument("--manifest")
    p.add_argument("--out", help="scripts directory")

    p = add("split", cmd_split, "assign projects to train/eval")
    p.add_argument("--scripts")
    p.add_argument("--ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("concat", cmd_concat, "concatenate scripts into a training file")
    p.add_argument("--scripts")
    p.add_argument("--split-file")
    p.add_argument("--split", choices=("train", "eval", "all"), default="train")
    p.add_argument("--strip-comments", action="store_true")
    p.add_argument("--plain", action="store_true", help="plain Python view instead of training form")
    p.add_argument("--out")

    p = add("bpe-train", cmd_bpe_train, "learn a byte-level BPE vocabulary")
    p.add_argument("--corpus")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--out")

    p = add("encode", cmd_encode, "encode text with a tokenizer")
    p.add_argument("--text", required=True)
    p.add_argument("--tokenizer", help="directory with vocab.txt and merges.txt")
    p.add_argument("--vocab", help="vocabulary file (line list or JSON encoder)")
    p.add_argument("--merges")

    p = add("docmap", cmd_docmap, "crawl package sources for docstring titles")
    p.add_argument("--roots", nargs="+")
    p.add_argument("--modules", help="module list (first column of a modfreq file)")
    p.add_argument("--out")

    p = add("modfreq", cmd_modfreq, "count imported root modules")
    p.add_argument("--scripts")
    p.add_argument("--split-file")
    p.add_argument("--top", type=int)
    p.add_argument("--out")

    p = add("inject", cmd_inject, "insert docstring comments at resolved call sites")
    p.add_argument("--scripts")
    p.add_argument("--mapping")
    p.add_argument("--rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--strip-comments", action="store_true")
    p.add_argument("--out")

    p = add("bench", cmd_bench, "benchmark mining and curation")
    bsub = p.add_subparsers(dest="bench_cmd", required=True)
    b = bsub.add_parser("mine", parents=[common])
    b.add_argument("--scripts")
    b.add_argument("--split-file")
    b.add_argument("--max-tokens", type=int)
    b.add_argument("--sample", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b = bsub.add_parser("filter", parents=[common])
    b.add_argument("--candidates", required=True)
    b.add_argument("--train-corpus", required=True, help="plain rendering of the training scripts")
    b.add_argument("--out", required=True)
    b.add_argument("--dropped")
    b = bsub.add_parser("accept", parents=[common])
    b.add_argument("--annotations")
    b.add_argument("--candidates", help="accept all with automatic spans when no annotations are given")
    b.add_argument("--out", required=True)
    b = bsub.add_parser("post", parents=[common])
    b.add_argument("--candidates", required=True)
    b.add_argument("--acceptance", required=True)
    b.add_argument("--out", required=True)
    for name in ("stats", "modules"):
        b = bsub.add_parser(name, parents=[common])
        b.add_argument("--benchmark", required=True)
        b.add_argument("--released", action="store_true", help="read an externally published dump")
        if name == "modules":
            b.add_argument("--top", type=int)

    p = add("train-lm", cmd_train_lm, "train the n-gram backend")
    p.add_argument("--corpus")
    p.add_argument("--tokenizer")
    p.add_argument("--order", type=int)
    p.add_argument("--backend-id", default="ngram")
    p.add_argument("--out")

    p = add("predict", cmd_predict, "decode predictions for a benchmark")
    p.add_argument("--benchmark")
    p.add_argument("--backend", choices=("ngram", "extern"), default="ngram")
    p.add_argument("--model")
    p.add_argument("--command", help="extern backend command line")
    p.add_argument("--tokenizer")
    p.add_argument("--backend-id")
    p.add_argument("--beam", type=int)
    p.add_argument("--min", type=int)
    p.add_argument("--max", type=int)
    p.add_argument("--ctx", type=int)
    p.add_argument("--latency", action="store_true", help="record wall-clock latency (non-reproducible)")
    p.add_argument("--out")

    p = add("score", cmd_score, "score predictions against a benchmark")
    p.add_argument("--pred", nargs="+")
    p.add_argument("--bench")
    p.add_argument("--ratings")
    p.add_argument("--call-filter", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--per-rater", action="store_true")
    p.add_argument("--out")

    p = add("report", cmd_report, "print a score report")
    p.add_argument("--dir")

    add("run-all", cmd_run_all, "run every stage in order")
    return ap


def _check_outputs(args) -> None:
    needs_out = {"ingest": "manifest", "concat": "scripts", "bpe-train": "corpus", "docmap": "roots",
                 "inject": "scripts", "train-lm": "corpus"}
    key = needs_out.get(args.command)
    if key and getattr(args, key, None) and not args.out:
        raise MissingInput(f"--out is required with --{key.replace('_', '-')}")
    if args.command == "bench" and args.bench_cmd == "mine" and args.scripts and not args.out:
        raise MissingInput("--out is required with --scripts")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_outputs(args)
        return args.func(args)
    except ConfigInvalid as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingInput, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (json.JSONDecodeError, KeyError, corpus.MalformedNotebook, metrics.JoinMismatch,
            benchmine.WrongAnnotatorCount, MalformedRecord) as exc:
        print(f"input error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
