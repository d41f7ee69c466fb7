import pytest
from hypothesis import given, strategies as st

from miaguard.errors import InputError
from miaguard.judge_analysis import (
    Category, Reason, bias_from_counts, bias_report, categorize, normalize_answer, prefix_similarity,
)
from miaguard.metrics import f1_tokens

# (judge, target, base) -> (category, reason); F1s worked out by hand:
#   "p q r s" vs "p q x y": overlap 2, F1 = 4/8 = 0.5
#   "p q r s" vs "r s u v w z": overlap 2, F1 = 4/10 = 0.4, and 0.5 > 1.15 * 0.4 = 0.46
BRANCHES = [
    (("Same answer.", "same answer", "SAME answer"), Category.MIXED, Reason.BOTH),
    (("Paris!", "paris", "london"), Category.TARGET, Reason.EXACT),
    (("london", "paris", "London."), Category.BASE, Reason.EXACT),
    (("abc", "abd", "xyz"), Category.TARGET, Reason.PREFIX),
    (("abc", "xyz", "abd"), Category.BASE, Reason.PREFIX),
    (("abc", "xbc", "ybc"), Category.MIXED, Reason.SIMILARITY_TIE),
    (("p q r s", "p q x y", "r s u v w z"), Category.TARGET, Reason.F1),
    (("p q r s", "r s u v w z", "p q x y"), Category.BASE, Reason.F1),
    (("p q r s", "p q x y", "r s u v"), Category.MIXED, Reason.F1_TIE),
]


@pytest.mark.parametrize("triple,cat,why", BRANCHES)
def test_every_branch(triple, cat, why):
    r = categorize(*triple)
    assert (r.category, r.reason) == (cat, why)


def test_constructed_f1_values():
    assert f1_tokens("p q r s".split(), "p q x y".split()) == 0.5
    assert f1_tokens("p q r s".split(), "r s u v w z".split()) == pytest.approx(0.4)


def test_exact_fires_before_f1():
    # judge equals target after normalization even though F1 vs base is also 1
    r = categorize("a b", "A, b", "b a")
    assert (r.category, r.reason) == (Category.TARGET, Reason.EXACT)


def test_normalize_and_prefix():
    assert normalize_answer("Hello,  World!") == "hello world"
    assert normalize_answer("hello world") == "hello world"
    assert normalize_answer("") == ""
    assert prefix_similarity("abcdef", "abcxyz") == 0.5
    assert prefix_similarity("same", "same") == 1.0
    assert prefix_similarity("abc", "xbc") == 0.0
    assert prefix_similarity("", "") == 1.0
    # only the first 50 characters count
    assert prefix_similarity("a" * 60 + "x", "a" * 60 + "y") == 1.0


def test_bias_from_reported_counts():
    b = bias_from_counts(199, 104, 697)
    assert (b.p_target, b.p_base, b.p_mixed) == (0.199, 0.104, 0.697)
    assert b.bias == 0.095
    assert b.bias == pytest.approx(abs(b.p_target - b.p_base), abs=1e-15)


def test_bias_trivial():
    assert bias_from_counts(0, 0, 5).bias == 0.0
    assert bias_from_counts(5, 0, 0).bias == 1.0
    with pytest.raises(InputError):
        bias_report([])


words = st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), max_size=5).map(" ".join)


@given(st.lists(st.tuples(words, words, words), min_size=1, max_size=30))
def test_swap_symmetry_and_totality(triples):
    fwd = [categorize(j, t, b) for j, t, b in triples]
    rev = [categorize(j, b, t) for j, t, b in triples]
    f, r = bias_report(fwd), bias_report(rev)
    assert (f.n_target, f.n_base, f.n_mixed) == (r.n_base, r.n_target, r.n_mixed)
    assert f.bias == r.bias
    assert f.total == len(triples)
    assert f.p_target + f.p_base + f.p_mixed == pytest.approx(1.0, abs=1e-12)
