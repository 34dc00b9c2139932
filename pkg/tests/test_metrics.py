import itertools
import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from reportgen import metrics as M


def W(s):
    return s.split()


# Every expected value below was worked out by hand from the metric definitions.
GOLDEN = [
    ("bleu1 clipped", lambda: M.bleu([W("the the the the")], [W("the cat")], 1)[0], 0.25),
    ("bleu identity", lambda: M.bleu([W("a b c d e")], [W("a b c d e")])[3], 1.0),
    ("bleu2 partial", lambda: M.bleu([W("a b c d")], [W("a b x d")], 2)[1], 0.5),
    ("bleu4 no 4-gram match", lambda: M.bleu([W("a b c d")], [W("a b c e")])[3], 0.0),
    ("bleu1 brevity", lambda: M.bleu([W("a b c")], [W("a b c d e f")], 1)[0], math.exp(-1)),
    ("bleu1 brevity short", lambda: M.bleu([W("the cat")], [W("the cat sat on the mat")], 1)[0], math.exp(-2)),
    ("bleu1 pooled", lambda: M.bleu([W("a"), W("c d e f")], [W("a"), W("c x y z")], 1)[0], 0.4),
    ("rouge partial", lambda: M.rouge_l(W("the cat sat"), W("the cat ran")), 2 / 3),
    ("rouge beta", lambda: M.rouge_l(W("a b c d"), W("a c d e f")), 2.44 * 0.75 * 0.6 / (0.6 + 1.44 * 0.75)),
    ("rouge disjoint", lambda: M.rouge_l(W("a b"), W("c d")), 0.0),
    ("meteor identity", lambda: M.meteor(W("the cat sat"), W("the cat sat")), 1 - 0.5 / 27),
    ("meteor stem", lambda: M.meteor(W("cats"), W("cat")), 0.5),
    ("meteor stem stage", lambda: M.meteor(W("the cats sat"), W("the cat sat")), 1 - 0.5 / 27),
    ("meteor two chunks", lambda: M.meteor(W("sat the cat"), W("the cat sat")), 23 / 27),
    ("meteor recall", lambda: M.meteor(W("the cat sat"), W("the cat on the mat sat")), 230 / 513),
    ("meteor zero", lambda: M.meteor(W("dog"), W("the cat")), 0.0),
]


@pytest.mark.parametrize("name,fn,expected", GOLDEN, ids=[g[0] for g in GOLDEN])
def test_golden_table(name, fn, expected):
    assert abs(fn() - expected) <= 1e-9


def test_clipped_p1_quarter():
    assert M.modified_precision_counts(W("the the the the"), W("the cat"), 1) == (1, 4)


def lcs_exhaustive(a, b):
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    best = 0
    for r in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), r):
            if is_subseq([a[i] for i in idx], b):
                return r
    return best


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abcd"), max_size=8), st.lists(st.sampled_from("abcd"), max_size=8))
def test_lcs_matches_exhaustive(a, b):
    assert M.lcs_length(a, b) == lcs_exhaustive(a, b)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=12))
def test_identity_scores(x):
    assert M.rouge_l(x, x) == 1.0
    assert M.meteor(x, x) == pytest.approx(1 - 0.5 * (1 / len(x)) ** 3, abs=1e-12)
    b = M.bleu([x], [x])
    assert all(v == 1.0 for v, n in zip(b, range(1, 5)) if n <= len(x))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
                          st.lists(st.sampled_from("abcde"), min_size=1, max_size=8)), min_size=1, max_size=5),
       st.randoms())
def test_scores_in_range_and_order_free(pairs, rnd):
    cands, refs = [p[0] for p in pairs], [p[1] for p in pairs]
    ids = [str(i) for i in range(len(pairs))]
    rep = M.evaluate_corpus(ids, cands, refs)
    for v in rep.corpus().values():
        assert 0.0 <= v <= 1.0 + 1e-12
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    rep2 = M.evaluate_corpus([ids[i] for i in order], [cands[i] for i in order], [refs[i] for i in order])
    assert rep2.bleu4 == rep.bleu4 and rep2.bleu1 == rep.bleu1
    assert rep2.rouge_l == pytest.approx(rep.rouge_l, abs=1e-12)
    assert rep2.meteor == pytest.approx(rep.meteor, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from("abc"), min_size=1, max_size=10), st.lists(st.sampled_from("abc"), max_size=10),
       st.integers(1, 4))
def test_clipping_never_exceeds_unclipped(cand, ref, n):
    clipped, total = M.modified_precision_counts(cand, ref, n)
    unclipped = sum(c for g, c in M.ngrams(cand, n).items() if g in M.ngrams(ref, n))
    assert clipped <= unclipped <= total


def test_smoothing_flag():
    assert M.bleu([W("a b c d")], [W("a b c e")])[3] == 0.0
    assert M.bleu([W("a b c d")], [W("a b c e")], smoothing=0.1)[3] > 0.0


def test_errors():
    with pytest.raises(ValueError):
        M.bleu([], [])
    with pytest.raises(ValueError):
        M.rouge_l(W("a"), [])
    with pytest.raises(ValueError):
        M.meteor(W("a"), [])


def test_eval_exports(tmp_path):
    rep = M.evaluate_corpus(["x", "y"], [W("a b c"), W("d e")], [W("a b c"), W("d f")])
    M.write_eval(tmp_path / "eval.json", tmp_path / "eval.csv", rep)
    data = json.loads((tmp_path / "eval.json").read_text())
    assert data["corpus"]["rouge_l"] == rep.rouge_l
    assert [s["sample_id"] for s in data["samples"]] == ["x", "y"]
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert lines[0].startswith("id,bleu1") and len(lines) == 4


@pytest.mark.parametrize("word,expected", [("caresses", "caress"), ("ponies", "poni"), ("cats", "cat"),
                                           ("relational", "relat"), ("hopping", "hop")])
def test_porter_reference_words(word, expected):
    assert M.stem(word) == expected
