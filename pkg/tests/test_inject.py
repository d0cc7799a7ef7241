import random
import textwrap

import pytest

from nlgp import corpus, inject
from nlgp.docmap import EntityDocMapping, crawl_docstrings

from conftest import FIXTURES

KMEANS = "from sklearn.cluster import KMeans\nk = KMeans()\nk.fit(Xtrain)\ny = k.predict(Xtest)\n"
KMEANS_ANNOTATED = (
    "from sklearn.cluster import KMeans\n"
    "# K-Means clustering\n"
    "k = KMeans()\n"
    "# Compute k-means clustering\n"
    "k.fit(Xtrain)\n"
    "# Predict closest cluster for each sample\n"
    "y = k.predict(Xtest)\n"
)
TABLE = {
    "sklearn.cluster.KMeans()": "K-Means clustering",
    "sklearn.cluster.KMeans().fit()": "Compute k-means clustering",
    "sklearn.cluster.KMeans().predict()": "Predict closest cluster for each sample",
}


def src(text):
    return corpus.script_from_source(textwrap.dedent(text))


def resolved(text, mapping):
    return [(s.callee_text, s.resolved_fqpn) for s in inject.resolve_source(textwrap.dedent(text), mapping)]


@pytest.fixture(scope="module")
def site_mapping():
    return crawl_docstrings([FIXTURES / "site_packages"])


def test_kmeans_listing():
    out, rep = inject.inject_script(src(KMEANS), EntityDocMapping.from_titles(TABLE), 1.0, seed=0)
    assert corpus.render_plain(out) == KMEANS_ANNOTATED
    assert (rep.visited, rep.resolved) == (3, 3)


def test_rate_zero_unchanged():
    s = src(KMEANS)
    out, _ = inject.inject_script(s, EntityDocMapping.from_titles(TABLE), 0.0, seed=0)
    assert out == s


def test_rate_out_of_range():
    with pytest.raises(ValueError):
        inject.inject_script(src(KMEANS), EntityDocMapping.from_titles(TABLE), 1.5, seed=0)


def test_two_calls_in_one_statement_outermost_first():
    m = EntityDocMapping.from_titles({"numpy.zeros()": "Return zeros", "numpy.log()": "Natural log"})
    out, _ = inject.inject_script(src("import numpy as np\nx = np.log(np.zeros(3))\n"), m, 1.0, 0)
    assert corpus.render_plain(out) == "import numpy as np\n# Natural log\n# Return zeros\nx = np.log(np.zeros(3))\n"


def test_comment_takes_statement_indent():
    m = EntityDocMapping.from_titles({"numpy.zeros()": "Return zeros"})
    out, _ = inject.inject_script(src("import numpy as np\nif True:\n    a = np.zeros(2)\n"), m, 1.0, 0)
    assert "    # Return zeros\n    a = np.zeros(2)\n" in corpus.render_plain(out)


def test_decorated_comment_above_decorators():
    m = EntityDocMapping.from_titles({"functools.lru_cache()": "Cache results"})
    text = "import functools\n@functools.lru_cache(maxsize=2)\ndef f():\n    return 1\n"
    sites = inject.resolve_source(text, m)
    assert [s.decorated for s in sites if s.resolved_fqpn] == [True]
    out, _ = inject.inject_script(src(text), m, 1.0, 0)
    assert corpus.render_plain(out).startswith("import functools\n# Cache results\n@functools")


def test_resolution_table(site_mapping):
    text = """
        import numpy as np
        import pandas as pd
        from sklearn.cluster import KMeans
        from matplotlib import pyplot as plt
        import matplotlib.pyplot

        df = pd.read_csv("a.csv")
        frame = pd.DataFrame(df)
        frame.head()
        km = KMeans()
        km.fit(frame)
        km = 3
        km.fit(frame)
        plt.hist(np.zeros(3))
        matplotlib.pyplot.show()
        f()(x)
        print(len(df))
    """
    got = resolved(text, site_mapping)
    assert got == [
        ("pd.read_csv", "pandas.read_csv()"),
        ("pd.DataFrame", "pandas.DataFrame()"),
        ("frame.head", "pandas.DataFrame().head()"),
        ("KMeans", "sklearn.cluster.KMeans()"),
        ("km.fit", "sklearn.cluster.KMeans().fit()"),
        ("km.fit", None),  # rebound to a non-instance
        ("plt.hist", "matplotlib.pyplot.hist()"),
        ("np.zeros", "numpy.zeros()"),
        ("matplotlib.pyplot.show", "matplotlib.pyplot.show()"),
        ("f()", None),
        ("f", None),
        ("print", "builtins.print()"),
        ("len", "builtins.len()"),
    ]


def test_flow_sensitive_across_statements(site_mapping):
    text = """
        from sklearn.cluster import KMeans
        k.fit(X)
        k = KMeans()
        k.fit(X)
    """
    assert [r for _, r in resolved(text, site_mapping)] == [
        None, "sklearn.cluster.KMeans()", "sklearn.cluster.KMeans().fit()"]


def test_unparseable_script_raises():
    with pytest.raises(inject.ParseError):
        inject.resolve_source("def broken(:\n", EntityDocMapping())


def _code_only(s):
    return [ln for ln in s.lines if not ln.is_comment]


def test_code_preserved_on_fixture(fixture_scripts, site_mapping):
    for s in fixture_scripts[0] + fixture_scripts[1]:
        for seed in range(3):
            out, _ = inject.inject_script(s, site_mapping, 0.5, seed, strip_existing=True)
            assert _code_only(out) == _code_only(corpus.strip_comments(s))


def test_placement_in_original_coordinates(fixture_scripts, site_mapping):
    for s in fixture_scripts[0]:
        base = corpus.strip_comments(s)
        sites = inject.resolve_calls(base, site_mapping)
        out = inject.inject_comments(base, sites, site_mapping, 1.0, 0)
        # every statement line with k sampled sites gets exactly k comments directly above it
        per_stmt = {}
        for site in sites:
            if site.resolved_fqpn in site_mapping.entries:
                per_stmt[site.enclosing_statement_first_line] = per_stmt.get(site.enclosing_statement_first_line, 0) + 1
        orig_line = 0
        run = 0
        for ln in out.lines:
            if ln.is_comment:
                run += 1
                continue
            orig_line += 1
            assert run == per_stmt.get(orig_line, 0)
            run = 0


def test_bernoulli_rate():
    m = EntityDocMapping.from_titles({"numpy.zeros()": "Return zeros"})
    sites = [inject.CallSite("", i, "np.zeros", "numpy.zeros()", i) for i in range(10_000)]
    chosen = inject.sample_sites(sites, m, 0.2, random.Random(123))
    assert abs(len(chosen) / 10_000 - 0.2) <= 0.02


def test_injection_deterministic(fixture_scripts, site_mapping):
    s = fixture_scripts[0][0]
    a = inject.inject_script(s, site_mapping, 0.2, 9, strip_existing=True)[0]
    b = inject.inject_script(s, site_mapping, 0.2, 9, strip_existing=True)[0]
    assert a == b
