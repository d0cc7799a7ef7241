"""Acceptance checks; each records a PASS/FAIL line printed at the end of the session.

Run alone with ``pytest tests/test_acceptance.py -v``.  The external-data
reproduction check reads these optional environment variables:

NLGP_RELEASED_BENCHMARK    released benchmark dump (read with read_released_benchmark)
NLGP_RELEASED_PREDICTIONS  predictions JSONL (id, prediction, backend_id)
NLGP_RELEASED_RATINGS      ratings JSONL (case_id, rater_id, backend_id, usefulness, ...)
NLGP_GPT2_DIR              directory with the reference encoder.json and vocab.bpe
"""

import os
import random
import statistics
import time
from dataclasses import replace

import pytest

from nlgp import benchmine, corpus, inject, metrics
from nlgp.bpe import Tokenizer, train_bpe
from nlgp.docmap import EntityDocMapping, crawl_docstrings
from nlgp.pipeline import STAGES, StageFailure, Workspace, run_all, run_stage, stage_order
from nlgp.predictor import beam_search, greedy_search
from nlgp.records import load_predictions, read_jsonl, read_released_benchmark

from conftest import ACCEPTANCE, FIXTURES, fixture_config
from oracles import oracle_accept, oracle_kappa, random_fixture
from test_bpe import reference_dir
from test_inject import KMEANS, KMEANS_ANNOTATED, TABLE
from test_metrics import PLT, PLT_TOKENS
from test_pipeline import Interrupt, interrupt_at_commit, interrupt_mid_write, leftovers, tree_digests
from toy_backends import exhaustive, random_instance


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[name] = ("PASS" if ok else "FAIL", detail)
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


def skip(name: str, reason: str) -> None:
    ACCEPTANCE[name] = ("SKIP", reason)
    print(f"SKIP {name}: {reason}")
    pytest.skip(reason)


def test_tokenizer_conformance():
    name = "tokenizer conformance"
    d = reference_dir()
    if d is None:
        skip(name, "reference GPT-2 encoder.json/vocab.bpe not found; set NLGP_GPT2_DIR")
    tok = Tokenizer.from_dir(d)
    expected = ["b", "Ġ=", "Ġnp", ".", "zer", "os", "(", "10", ")"]
    timings = []
    for _ in range(20):
        tok._cache.clear()  # time the uncached merge loop, not a dictionary hit
        t0 = time.perf_counter()
        units = tok.encode("b = np.zeros(10)").tokens
        timings.append((time.perf_counter() - t0) * 1000)
    ms = statistics.median(timings)
    record(name, units == expected and ms < 1.0, f"units={units} median={ms:.3f} ms (cold cache)")


def test_injection_fixture():
    s = corpus.script_from_source(KMEANS)
    out, _ = inject.inject_script(s, EntityDocMapping.from_titles(TABLE), 1.0, seed=0)
    got = corpus.render_plain(out)
    record("injection fixture", got == KMEANS_ANNOTATED, "byte-identical" if got == KMEANS_ANNOTATED else repr(got))


def test_lexing_fixture():
    got = metrics.lex_code(PLT)
    record("metric lexing fixture", got == PLT_TOKENS, " ".join(got))


def test_scale_mapping():
    got = {r.value: metrics.map_scale(r) for r in metrics.Rating}
    ok = got == {"strongly_disagree": 0, "disagree": 1 / 3, "agree": 2 / 3, "strongly_agree": 1}
    record("scale mapping", ok, str(got))


def test_beam_oracle():
    t0 = time.perf_counter()
    exact = dominates = 0
    for seed in range(20):
        backend, cfg = random_instance(seed)
        best_score, best_ids = exhaustive(backend, cfg)
        wide = beam_search((), backend, replace(cfg, beam_width=backend.vocab ** cfg.max_tokens), backend.vocab)[0]
        exact += wide.ids == best_ids and abs(wide.score - best_score) < 1e-9
        top = beam_search((), backend, replace(cfg, beam_width=3), backend.vocab)[0]
        dominates += top.score >= greedy_search((), backend, cfg, backend.vocab).score - 1e-12
    secs = time.perf_counter() - t0
    record("beam-search oracle", exact == 20 and dominates == 20 and secs < 10,
           f"exhaustive match {exact}/20, width-3 >= greedy {dominates}/20, {secs:.2f} s")


def test_curation_arithmetic():
    rng = random.Random(2024)
    accept_ok = kappa_ok = 0
    worst = 0.0
    for _ in range(50):
        recs = random_fixture(rng, n_cases=rng.randint(1, 10))
        got = benchmine.curation_accept(recs)
        agree = True
        for case_id, group in benchmine.group_annotations(recs).items():
            expected = oracle_accept(group)
            actual = (got[case_id].span, got[case_id].intent) if case_id in got else None
            agree &= actual == expected
        accept_ok += agree
        matrix = benchmine.relevance_matrix(recs)
        diff = abs(benchmine.fleiss_kappa(matrix) - oracle_kappa(matrix))
        worst = max(worst, diff)
        kappa_ok += diff <= 1e-12
    all_agree = benchmine.fleiss_kappa([[True] * 3, [False] * 3, [True] * 3, [True] * 3])
    record("curation arithmetic", accept_ok == 50 and kappa_ok == 50 and all_agree == 1.0,
           f"accept {accept_ok}/50, kappa {kappa_ok}/50 (max diff {worst:.1e}), all-agree kappa {all_agree}")


def test_pipeline_determinism(tmp_path, monkeypatch):
    runs = []
    for name in ("a", "b"):
        ws = Workspace(fixture_config(tmp_path / name))
        run_all(ws)
        runs.append(tree_digests(ws.root))
    identical = runs[0] == runs[1] and len(runs[0]) > 0
    clean = True
    for interrupt in (interrupt_at_commit, interrupt_mid_write):
        ws = Workspace(fixture_config(tmp_path / f"int-{interrupt.__name__}"))
        for stage in stage_order(ws.cfg):
            outputs = STAGES[stage][2](ws)
            with monkeypatch.context() as m:
                interrupt(m)
                try:
                    run_stage(stage, ws)
                except (Interrupt, StageFailure):
                    clean &= not any(p.exists() for p in outputs)
            clean &= not leftovers(ws.root)
            run_stage(stage, ws)
    record("pipeline determinism", identical and clean,
           f"{len(runs[0])} files byte-identical across runs: {identical}; interrupted stages left no output: {clean}")


def test_property_suites(fixture_run):
    rng = random.Random(99)
    train, evals = fixture_run.split_scripts()
    tok = train_bpe("".join(corpus.training_text(s) for s in train), 400)
    round_trip = sum(tok.decode_bytes(tok.encode(b).ids) == b
                     for b in (rng.randbytes(rng.randint(0, 64)) for _ in range(10_000)))

    vocab = "a b c d e f ( ) . = x y np pd plt".split()
    metric_ok = 0
    for _ in range(1_000):
        p = rng.choices(vocab, k=rng.randint(1, 30))
        r = rng.choices(vocab, k=rng.randint(1, 30))
        s = metrics.bleu_scores(p, r)
        metric_ok += (0 <= s.raw <= 1 and 0 <= s.smoothed <= 1 and 0 <= metrics.iou(p, r) <= 1
                      and metrics.iou(p, p) == 1.0 and metrics.bleu_scores(p, p).smoothed == 1.0)

    mapping = crawl_docstrings([FIXTURES / "site_packages"])
    preserved = total = 0
    for s in train + evals:
        for seed in range(5):
            out, _ = inject.inject_script(s, mapping, 0.5, seed, strip_existing=True)
            total += 1
            preserved += [ln for ln in out.lines if not ln.is_comment] == corpus.strip_comments(s).lines

    overlap_ok = 0
    for _ in range(200):
        cands = [benchmine.CandidateCase(f"c{j}", "".join(f"v{rng.randint(0, 9)} = {rng.randint(0, 3)}\n"
                                                          for _ in range(rng.randint(0, 5))),
                                         f"# step {rng.randint(0, 20)}", "x = 1") for j in range(6)]
        planted = [c for c in cands if rng.random() < 0.5]
        text = "\n".join([benchmine.overlap_probe(c) for c in planted] + ["noise = 1"])
        kept, dropped = benchmine.overlap_filter(cands, text)
        overlap_ok += ({c.id for c in planted} <= {c.id for c in dropped}
                       and all(benchmine.overlap_probe(c) in text for c in dropped)
                       and all(benchmine.overlap_probe(c) not in text for c in kept))
    ok = round_trip == 10_000 and metric_ok == 1_000 and preserved == total and overlap_ok == 200
    record("property suites", ok,
           f"round trip {round_trip}/10000, metric bounds {metric_ok}/1000, "
           f"code preserved {preserved}/{total}, overlap filter {overlap_ok}/200")


def test_released_reproduction():
    name = "conditional reproduction"
    bench_path = os.environ.get("NLGP_RELEASED_BENCHMARK")
    if not bench_path:
        skip(name, "released benchmark not supplied (NLGP_RELEASED_BENCHMARK unset)")
    cases = read_released_benchmark(bench_path)
    st = benchmine.benchmark_stats(cases)
    stats_ok = st.count == 201 and abs(st.mean_target_loc - 2.45) <= 0.05 and abs(st.mean_intent_tokens - 5.39) <= 0.05
    detail = f"cases={st.count} target LoC={st.mean_target_loc:.3f} intent tokens={st.mean_intent_tokens:.3f}"
    pred_path, rating_path = os.environ.get("NLGP_RELEASED_PREDICTIONS"), os.environ.get("NLGP_RELEASED_RATINGS")
    if not (pred_path and rating_path):
        record(name, stats_ok, detail + "; predictions/ratings not supplied, score row not checked")
        return
    ratings = [metrics.RatingRecord.from_dict(r) for r in read_jsonl(rating_path)]
    table = metrics.score_report(load_predictions(pred_path), cases, ratings)
    row = next(r for r in table.rows if r["backend"] == "natural")
    # BLEU smoothing is unstated, so either variant may match the published value
    bleu_ok = min(abs(row["bleu"] - 0.25), abs(row["bleu_smoothed"] - 0.25)) <= 0.03
    rho_bleu_ok = min(abs((row["rho_bleu"] or 9) - 0.62), abs((row["rho_bleu_smoothed"] or 9) - 0.62)) <= 0.03
    row_ok = bleu_ok and rho_bleu_ok and abs(row["iou"] - 0.45) <= 0.03 and abs((row["rho_iou"] or 9) - 0.70) <= 0.03
    record(name, stats_ok and row_ok,
           detail + f"; natural BLEU={row['bleu']:.3f}/{row['bleu_smoothed']:.3f} IoU={row['iou']:.3f} "
                    f"rho={row['rho_bleu']}/{row['rho_iou']}")
