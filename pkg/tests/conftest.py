from __future__ import annotations

import shutil
from dataclasses import replace
from pathlib import Path

import pytest

from nlgp import corpus
from nlgp.bpe import train_bpe
from nlgp.config import load_config
from nlgp.pipeline import Workspace, run_all

FIXTURES = Path(__file__).parent / "fixtures"
FIXTURE_CFG = FIXTURES / "fixture.cfg"

# criterion name -> (ok, detail); filled by test_acceptance, printed at session end
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{status} {name}: {detail}")


def nb(*cells, language="python") -> dict:
    """Tiny nbformat-4 notebook from ("code"|"markdown", source) pairs."""
    return {
        "nbformat": 4,
        "metadata": {"kernelspec": {"language": language}},
        "cells": [{"cell_type": k, "source": src, "metadata": {}, **({"outputs": []} if k == "code" else {})}
                  for k, src in cells],
    }


def fixture_config(out_dir: Path):
    return replace(load_config(FIXTURE_CFG), output_dir=str(out_dir))


@pytest.fixture(scope="session")
def fixture_run(tmp_path_factory) -> Workspace:
    """One full pipeline run over the bundled fixture corpus."""
    ws = Workspace(fixture_config(tmp_path_factory.mktemp("run") / "out"))
    run_all(ws)
    return ws


@pytest.fixture(scope="session")
def fixture_scripts(fixture_run):
    train, evals = fixture_run.split_scripts()
    return train, evals


@pytest.fixture(scope="session")
def small_tokenizer(fixture_run):
    text = "".join(corpus.training_text(s) for s in fixture_run.split_scripts()[0])
    return train_bpe(text, 400)


@pytest.fixture
def fixture_copy(tmp_path) -> Path:
    dest = tmp_path / "fixtures"
    shutil.copytree(FIXTURES, dest, ignore=shutil.ignore_patterns("build_fixtures.py", "__pycache__"))
    return dest
