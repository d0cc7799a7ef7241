import random

import pytest

from nlgp import benchmine, corpus
from nlgp.benchmine import Acceptance, CandidateCase
from nlgp.corpus import ScriptDoc
from nlgp.records import BenchmarkCase

from oracles import ann, oracle_accept, oracle_kappa, random_fixture


def eval_script(text, path="e/nb.ipynb"):
    s = corpus.clean_script(corpus.script_from_source(text, path, "e"))
    return ScriptDoc(s.lines, path, "e", split="eval")


# --- candidate generation ---------------------------------------------------------


def test_single_comment_candidate():
    s = eval_script("import numpy as np\n# plot the data\nx = 1\ny = 2\nz = 3\n")
    (c,) = benchmine.mine_candidates([s])
    assert c.intent == "# plot the data"
    assert c.target_lines == ["x = 1", "y = 2", "z = 3"]
    assert c.context == "import numpy as np\n"


def test_long_comment_excluded():
    intent = "# " + " ".join(["word"] * 11)
    s = eval_script(f"x = 1\n{intent}\ny = 2\n")
    assert benchmine.mine_candidates([s]) == []
    s = eval_script("x = 1\n# " + " ".join(["data"] * 10) + "\ny = 2\n")
    assert len(benchmine.mine_candidates([s])) == 1


def test_trailing_comment_excluded():
    s = eval_script("x = 1\n# show the result here\n")
    assert benchmine.mine_candidates([s]) == []


def test_train_scripts_rejected():
    s = eval_script("# load it\nx = 1\n")
    with pytest.raises(ValueError):
        benchmine.mine_candidates([ScriptDoc(s.lines, "t", "t", split="train")])


def test_sampling_deterministic_and_bounded():
    text = "".join(f"# step {i} of the work\nx{i} = {i}\n" for i in range(10))
    s = eval_script(text)
    a = benchmine.mine_candidates([s], sample_n=4, seed=1)
    b = benchmine.mine_candidates([s], sample_n=4, seed=1)
    assert a == b and len(a) == 4


# --- overlap filter ---------------------------------------------------------------


def _cand(context, intent="# load the file", target="x = 1"):
    return CandidateCase("c", context, intent, target)


def test_probe_dropped_when_present():
    c = _cand("a = 1\nb = 2\nc = 3\nd = 4\n")
    corpus_text = "zzz\nb = 2\nc = 3\nd = 4\n# load the file\nmore"
    kept, dropped = benchmine.overlap_filter([c], corpus_text)
    assert dropped == [c] and kept == []


def test_empty_training_corpus_keeps_all():
    cs = [_cand("a = 1\n"), _cand("")]
    assert benchmine.overlap_filter(cs, b"") == (cs, [])


def test_short_context_probe():
    c = _cand("\na = 1\n\nb = 2\n")
    assert benchmine.overlap_probe(c) == "a = 1\nb = 2\n# load the file"


# --- curation ---------------------------------------------------------------------


def test_exact_agreement_accepted():
    recs = [ann("c", "a", True, (1, 3)), ann("c", "b", True, (1, 3)), ann("c", "d", False)]
    acc = benchmine.accept_case(recs)
    assert acc.span == (1, 3)


def test_single_relevant_rejected():
    recs = [ann("c", "a", True, (1, 3)), ann("c", "b", False), ann("c", "d", False)]
    assert benchmine.accept_case(recs) is None


def test_no_close_pair_rejected():
    recs = [ann("c", "a", True, (1, 3)), ann("c", "b", True, (1, 6)), ann("c", "d", True, (9, 12))]
    assert benchmine.accept_case(recs) is None


def test_wrong_annotator_count():
    with pytest.raises(benchmine.WrongAnnotatorCount):
        benchmine.accept_case([ann("c", "a", True, (1, 1))])


def test_majority_intent():
    recs = [ann("c", "a", True, (1, 2), "read csv"), ann("c", "b", True, (1, 2), "read csv"),
            ann("c", "d", False)]
    assert benchmine.accept_case(recs).intent == "read csv"
    recs[1] = ann("c", "b", True, (1, 2), "load csv")
    assert benchmine.accept_case(recs).intent is None


def test_curation_matches_oracle():
    rng = random.Random(77)
    for _ in range(100):
        recs = random_fixture(rng)
        got = benchmine.curation_accept(recs)
        for case_id, group in benchmine.group_annotations(recs).items():
            expected = oracle_accept(group)
            if expected is None:
                assert case_id not in got
            else:
                assert (got[case_id].span, got[case_id].intent) == expected


def test_acceptance_monotone():
    rng = random.Random(3)
    for _ in range(300):
        recs = random_fixture(rng, n_cases=1)
        before = benchmine.accept_case(recs) is not None
        off = [i for i, r in enumerate(recs) if not r.relevant]
        if not off:
            continue
        i = rng.choice(off)
        start = rng.randint(1, 4)
        recs[i] = ann(recs[i].case_id, recs[i].annotator_id, True, (start, start + rng.randint(0, 3)))
        if before:
            assert benchmine.accept_case(recs) is not None


def test_kappa_hand_computed():
    yes = [3, 3, 2, 1, 0, 3, 2, 2, 3, 1]
    matrix = [[i < k for i in range(3)] for k in yes]
    assert benchmine.fleiss_kappa(matrix) == pytest.approx(0.25, abs=1e-12)


def test_kappa_perfect_agreement():
    assert benchmine.fleiss_kappa([[True] * 3, [False] * 3, [True] * 3]) == 1.0
    assert benchmine.fleiss_kappa([[True] * 3] * 4) == 1.0


def test_kappa_matches_oracle():
    rng = random.Random(8)
    for _ in range(200):
        m = [[rng.random() < 0.5 for _ in range(3)] for _ in range(rng.randint(1, 12))]
        assert benchmine.fleiss_kappa(m) == pytest.approx(oracle_kappa(m), abs=1e-12)


def test_kappa_bounds():
    rng = random.Random(9)
    for _ in range(200):
        m = [[rng.random() < 0.5 for _ in range(3)] for _ in range(rng.randint(1, 12))]
        assert -1 <= benchmine.fleiss_kappa(m) <= 1


# --- postprocessing ---------------------------------------------------------------


def test_leading_target_lines_move_to_context():
    c = CandidateCase("c", "import os\n", "# do it", "a = 1\nb = 2\nc = 3\nd = 4")
    case = benchmine.postprocess(c, Acceptance("c", (3, 4)))
    assert case.context == "import os\na = 1\nb = 2\n"
    assert case.target == "c = 3\nd = 4"


def test_import_used_only_by_target_moves():
    c = CandidateCase("c", "import numpy as np\nimport matplotlib.pyplot as plt\nx = np.arange(3)\n",
                      "# plot x", "plt.plot(x)")
    case = benchmine.postprocess(c, Acceptance("c", (1, 1)))
    assert case.target == "import matplotlib.pyplot as plt\nplt.plot(x)"
    assert case.context == "import numpy as np\nx = np.arange(3)\n"


def test_import_used_elsewhere_stays():
    c = CandidateCase("c", "import numpy as np\nx = np.arange(3)\n", "# mean", "m = np.mean(x)")
    case = benchmine.postprocess(c, Acceptance("c", (1, 1)))
    assert case.target == "m = np.mean(x)"


def test_target_comments_stripped():
    c = CandidateCase("c", "", "# go", "x = 1  # set x\n# explain\ny = '#not a comment'")
    case = benchmine.postprocess(c, Acceptance("c", (1, 3)))
    assert case.target == "x = 1\ny = '#not a comment'"


def test_revised_intent_used():
    c = CandidateCase("c", "", "# go", "x = 1")
    assert benchmine.postprocess(c, Acceptance("c", (1, 1), "set x")).intent == "set x"


def test_bad_span():
    with pytest.raises(ValueError):
        benchmine.postprocess(CandidateCase("c", "", "# go", "x = 1"), Acceptance("c", (1, 2)))


def test_auto_span_respects_block_and_syntax():
    c = CandidateCase("c", "", "# go", "for i in x:\n    y(i)\nz = 1\nw = 2", block_lines=4)
    assert benchmine.auto_span(c) == (1, 3)
    c = CandidateCase("c", "", "# go", "a = 1\nb = 2\nc = 3", block_lines=1)
    assert benchmine.auto_span(c) == (1, 1)


# --- statistics -------------------------------------------------------------------


def test_stats_single_case():
    case = BenchmarkCase("c", "a\nb\nc\nd\n", "# one two three four five", "x = 1\ny = 2")
    assert benchmine.benchmark_stats([case]).as_tuple() == (1, 4, 2, 5)


def test_modules_dedup_per_case():
    case = BenchmarkCase("c", "", "# read", "import pandas as pd\npd.read_csv('f.csv')")
    assert benchmine.module_distribution([case]).counts == {"pandas": 1}


def test_modules_from_context_bindings():
    a = BenchmarkCase("a", "import pandas as pd\n", "# read", "df = pd.read_csv('f.csv')")
    b = BenchmarkCase("b", "", "# read", "import pandas\npandas.DataFrame()")
    none = BenchmarkCase("n", "", "# add", "x = 1 + 2\nprint(x)")
    assert benchmine.module_distribution([a, b, none]).counts == {"pandas": 2}
