"""Tests for the deterministic text algorithms, checked against brute-force oracles."""

from __future__ import annotations

import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordfab.metrics import TokenSeq, cosine_similarity, lcs_length, rouge_l_recall, tokenize


def brute_force_lcs(a: list[str], b: list[str]) -> int:
    """Exhaustively enumerate subsequences of ``a``; independent of the DP path."""
    best = 0
    for r in range(len(a), 0, -1):
        if r <= best:
            break
        for combo in itertools.combinations(a, r):
            it = iter(b)
            if all(tok in it for tok in combo):
                best = r
                break
    return best


def test_tokenize_empty():
    assert tokenize("").tokens == ()


def test_tokenize_lowercases_words():
    assert tokenize("TGFBI expression predicts").tokens == ("tgfbi", "expression", "predicts")


def test_tokenize_drops_punctuation():
    assert tokenize("ALP, osteocalcin.").tokens == ("alp", "osteocalcin")


def test_tokenize_keeps_digits_and_offsets():
    seq = tokenize("type 2 diabetes")
    assert seq.tokens == ("type", "2", "diabetes")
    assert seq.offsets == ((0, 4), (5, 6), (7, 15))


def test_tokenize_underscore_is_separator():
    assert tokenize("gene_name").tokens == ("gene", "name")


def test_tokenseq_rejects_mismatched_offsets():
    with pytest.raises(ValueError):
        TokenSeq(tokens=("a", "b"), offsets=((0, 1),))


def test_lcs_empty_side():
    assert lcs_length([], ["a", "b"]) == 0
    assert lcs_length(["a", "b"], []) == 0


def test_lcs_identity():
    xs = ["x", "y", "z"]
    assert lcs_length(xs, xs) == 3


def test_lcs_known_value():
    assert lcs_length(["a", "b", "c", "d"], ["a", "c", "d", "e"]) == 3


def test_lcs_matches_brute_force_on_random_pairs():
    rng = random.Random(13)
    alphabet = ["a", "b", "c", "d"]
    for _ in range(300):
        a = [rng.choice(alphabet) for _ in range(rng.randint(0, 10))]
        b = [rng.choice(alphabet) for _ in range(rng.randint(0, 10))]
        assert lcs_length(a, b) == brute_force_lcs(a, b)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.sampled_from("abcd"), max_size=10),
    st.lists(st.sampled_from("abcd"), max_size=10),
)
def test_lcs_properties(a, b):
    n = lcs_length(a, b)
    assert n == lcs_length(b, a)
    assert n <= min(len(a), len(b))
    assert lcs_length(a, a) == len(a)


def test_rouge_identical_texts():
    text = "aspirin lowers fever"
    assert rouge_l_recall(text, text) == 1.0


def test_rouge_known_value():
    # LCS("a b c d", "a c d e") = 3 over 4 reference tokens.
    assert rouge_l_recall("a b c d", "a c d e") == 0.75


def test_rouge_empty_reference_raises():
    with pytest.raises(ValueError):
        rouge_l_recall("...", "anything")


def test_rouge_is_one_iff_reference_is_subsequence():
    assert rouge_l_recall("b d", "a b c d") == 1.0
    assert rouge_l_recall("d b", "a b c d") < 1.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
    st.lists(st.sampled_from("abcd"), max_size=8),
)
def test_rouge_range_property(ref_tokens, cand_tokens):
    score = rouge_l_recall(" ".join(ref_tokens), " ".join(cand_tokens))
    assert 0.0 <= score <= 1.0


def test_cosine_self_similarity():
    assert cosine_similarity([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal():
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0


def test_cosine_known_value():
    # dot = 32, |u| = sqrt(14), |v| = sqrt(77): 32 / sqrt(1078).
    expected = 32.0 / math.sqrt(1078.0)
    assert cosine_similarity([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]) == pytest.approx(expected, abs=1e-9)


def test_cosine_dimension_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity([1.0], [1.0, 2.0])


def test_cosine_zero_vector():
    with pytest.raises(ValueError):
        cosine_similarity([0.0, 0.0], [1.0, 2.0])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-10, 10), min_size=2, max_size=6),
    st.floats(0.01, 100.0),
    st.floats(0.01, 100.0),
)
def test_cosine_scale_invariance(u, alpha, beta):
    if all(abs(x) < 1e-6 for x in u):
        return
    v = [x + 0.5 for x in u]
    if all(abs(x) < 1e-6 for x in v):
        return
    base = cosine_similarity(u, v)
    scaled = cosine_similarity([alpha * x for x in u], [beta * x for x in v])
    assert scaled == pytest.approx(base, abs=1e-12)
