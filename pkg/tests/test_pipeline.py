import hashlib
import json
import os
from pathlib import Path

import pytest

from nlgp import pipeline
from nlgp.pipeline import STAGES, MissingInput, StageFailure, Workspace, run_all, run_stage, stage_order

from conftest import fixture_config


def tree_digests(root: Path) -> dict[str, str]:
    """sha256 of every file under ``root`` except the append-only run log."""
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != pipeline.RUN_LOG}


def leftovers(root: Path) -> list[Path]:
    return [p for p in root.rglob(".*") if ".tmp-" in p.name or ".old-" in p.name]


class Interrupt(BaseException):
    """Stands in for a signal arriving mid-stage."""


def interrupt_at_commit(monkeypatch):
    def boom(*a, **k):
        raise Interrupt()

    monkeypatch.setattr(os, "replace", boom)


def interrupt_mid_write(monkeypatch):
    """Let the first record file be written, then fail."""
    real = pipeline.write_jsonl

    def partial(path, records):
        real(path, records)
        raise Interrupt()

    monkeypatch.setattr(pipeline, "write_jsonl", partial)
    import nlgp.metrics

    def partial_report(self, out_dir):
        Path(out_dir, "report.tsv").write_text(self.to_tsv())
        raise Interrupt()

    monkeypatch.setattr(nlgp.metrics.ScoreTable, "write", partial_report)


def test_run_all_end_to_end(fixture_run):
    root = fixture_run.root
    for rel in ("bench/benchmark.jsonl", "predictions/natural.jsonl", "report/report.json"):
        assert (root / rel).stat().st_size > 0
    report = json.loads((root / "report/report.json").read_text())
    assert {r["backend"] for r in report["rows"]} == {"natural", "docstring", "nocomment", "all models"}
    log = [json.loads(line) for line in (root / pipeline.RUN_LOG).read_text().splitlines()]
    assert [m["stage"] for m in log] == stage_order(fixture_run.cfg)
    assert all(m["outputs"] and m["config_hash"] == fixture_run.cfg.digest() for m in log)


def test_two_runs_byte_identical(fixture_run, tmp_path):
    ws = Workspace(fixture_config(tmp_path / "again"))
    run_all(ws)
    assert tree_digests(ws.root) == tree_digests(fixture_run.root)


def test_rerun_stage_same_digests(tmp_path):
    ws = Workspace(fixture_config(tmp_path / "out"))
    first = run_stage("ingest", ws)
    second = run_stage("ingest", ws)
    assert first.outputs == second.outputs and first.outputs


def test_missing_mapping_named(tmp_path):
    ws = Workspace(fixture_config(tmp_path / "out"))
    run_stage("ingest", ws)
    run_stage("split", ws)
    with pytest.raises(MissingInput, match="mapping.jsonl"):
        run_stage("inject", ws)


def test_stage_failure_wraps_errors(tmp_path, monkeypatch):
    ws = Workspace(fixture_config(tmp_path / "out"))
    run_stage("ingest", ws)

    def bad(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipeline.corpus, "split_corpus", bad)
    with pytest.raises(StageFailure, match="disk on fire"):
        run_stage("split", ws)
    assert not ws.split.exists()


@pytest.mark.parametrize("interrupt", [interrupt_at_commit, interrupt_mid_write])
def test_interrupted_stage_leaves_no_output(tmp_path, monkeypatch, interrupt):
    cfg = fixture_config(tmp_path / "out")
    ws = Workspace(cfg)
    hit = []
    for name in stage_order(cfg):
        outputs = STAGES[name][2](ws)
        with monkeypatch.context() as m:
            interrupt(m)
            try:
                run_stage(name, ws)
                interrupted = False
            except (Interrupt, StageFailure):
                interrupted = True
        if interrupted:
            hit.append(name)
            assert not any(p.exists() for p in outputs), name
        assert not leftovers(ws.root), name
        run_stage(name, ws)  # finish the stage so the next one has its inputs
        assert all(p.exists() for p in outputs)
    if interrupt is interrupt_at_commit:
        assert hit == stage_order(cfg)
    else:
        assert {"ingest", "bench", "predict", "score"} <= set(hit)


def test_interrupted_rerun_keeps_previous_output(fixture_run, tmp_path, monkeypatch):
    ws = Workspace(fixture_config(tmp_path / "out"))
    run_all(ws)
    before = tree_digests(ws.root)
    for name in ("bench", "predict", "score"):
        with monkeypatch.context() as m:
            interrupt_at_commit(m)
            with pytest.raises(Interrupt):
                run_stage(name, ws)
        assert tree_digests(ws.root) == before, name
        assert not leftovers(ws.root)


def test_atomic_path_file(tmp_path):
    target = tmp_path / "a.txt"
    with pipeline.atomic_path(target) as tmp:
        tmp.write_text("done")
    assert target.read_text() == "done"
    with pytest.raises(RuntimeError):
        with pipeline.atomic_path(target) as tmp:
            tmp.write_text("partial")
            raise RuntimeError()
    assert target.read_text() == "done"
    assert not leftovers(tmp_path)


def test_atomic_dir_swap_failure_restores_previous(tmp_path, monkeypatch):
    target = tmp_path / "d"
    with pipeline.atomic_path(target, is_dir=True) as tmp:
        (tmp / "f").write_text("old")
    real, calls = os.replace, []

    def second_fails(src, dst):
        calls.append(src)
        if len(calls) == 2:
            raise Interrupt()
        real(src, dst)

    monkeypatch.setattr(os, "replace", second_fails)
    with pytest.raises(Interrupt):
        with pipeline.atomic_path(target, is_dir=True) as tmp:
            (tmp / "f").write_text("new")
    assert (target / "f").read_text() == "old"
    assert not leftovers(tmp_path)
