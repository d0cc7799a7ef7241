"""Brute-force reference implementations for curation and agreement."""

from fractions import Fraction

from nlgp.benchmine import AnnotationRecord


def ann(case, who, relevant, span=None, intent=""):
    return AnnotationRecord(case, who, relevant, intent, span)


def oracle_accept(recs):
    """Smallest qualifying annotator-id pair, by enumerating every unordered pair."""
    best = None
    for a in recs:
        for b in recs:
            if a.annotator_id >= b.annotator_id or not (a.relevant and b.relevant):
                continue
            if a.target_line_span is None or b.target_line_span is None:
                continue
            if all(abs(x - y) <= 2 for x, y in zip(a.target_line_span, b.target_line_span)):
                key = (a.annotator_id, b.annotator_id)
                if best is None or key < best[0]:
                    best = (key, a.target_line_span)
    if best is None:
        return None
    tally = {}
    for r in recs:
        text = r.revised_intent.strip()
        if r.relevant and text:
            tally[text] = tally.get(text, 0) + 1
    winners = [t for t, n in tally.items() if 2 * n > len(recs)]
    return best[1], (winners[0] if winners else None)


def oracle_kappa(matrix):
    """Fleiss kappa from category counts with exact fractions."""
    N, n = len(matrix), len(matrix[0])
    counts = [[sum(1 for v in row if v == cat) for cat in (True, False)] for row in matrix]
    p = [Fraction(sum(c[j] for c in counts), N * n) for j in range(2)]
    P = [Fraction(sum(x * x for x in c) - n, n * (n - 1)) for c in counts]
    P_bar = sum(P) / N
    P_e = sum(q * q for q in p)
    if P_e == 1:
        return 1.0
    return float((P_bar - P_e) / (1 - P_e))


def random_fixture(rng, n_cases=8):
    records = []
    intents = ["load the data", "plot it", "fit model"]
    for c in range(n_cases):
        for who in ("a1", "a2", "a3"):
            rel = rng.random() < 0.6
            span = None
            if rel:
                start = rng.randint(1, 4)
                span = (start, start + rng.randint(0, 4))
            records.append(ann(f"c{c}", who, rel, span, rng.choice(intents + [""]) if rel else ""))
    return records
