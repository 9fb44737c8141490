import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import brute_bleu, brute_corpus_bleu, brute_div
from lencap.levels import plan_4_level
from lencap.metrics import (bleu, control_precision, corpus_bleu, distinct_fraction, div_n, length_histogram,
                            mean_div_n)

PLAN = plan_4_level()


def random_cases(seed, count=50):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        vocab = int(rng.integers(2, 5))
        cand = rng.integers(0, vocab, int(rng.integers(1, 7))).tolist()
        refs = [rng.integers(0, vocab, int(rng.integers(1, 7))).tolist() for _ in range(int(rng.integers(1, 4)))]
        yield cand, refs


def test_control_precision():
    assert control_precision([(1, 5)] * 10, PLAN) == {1: 1.0}
    assert control_precision([(2, n) for n in (9, 10, 14, 15)], PLAN) == {2: 0.5}
    with pytest.raises(Exception):
        control_precision([(7, 3)], PLAN)


def test_div_n_examples():
    assert div_n([["a", "b"], ["a", "c"]], 1) == 0.75
    assert div_n([[1, 2, 3, 4]], 1) == 1.0
    assert div_n([[1, 2, 3, 4], [1, 2, 3, 4]], 1) == 0.5
    with pytest.raises(ValueError):
        div_n([[1], [2]], 2)


def test_mean_div_n_averages_per_image():
    groups = [[[1, 2], [1, 3]], [[4, 5]]]
    assert mean_div_n(groups, 1) == pytest.approx((0.75 + 1.0) / 2)


def test_distinct_fraction():
    assert distinct_fraction([[[1], [1], [2], [3]], [[5], [5], [5], [5]]]) == pytest.approx((0.75 + 0.25) / 2)


def test_bleu_examples():
    ref = [3, 4, 5, 6, 7, 8]
    assert bleu(ref, [ref]) == 1.0
    assert bleu([9, 9, 9, 9], [ref]) == 0.0
    assert bleu([], [ref]) == 0.0
    with pytest.raises(ValueError):
        bleu([1], [])


def test_bleu_hand_example():
    cand = [1, 2, 3, 4, 5, 6, 7]
    ref = [1, 2, 3, 4, 9, 6, 7, 8, 1, 2]
    # p1 = 6/7, p2 = 4/6, p3 = 2/5, p4 = 1/4, bp = exp(1 - 10/7)
    expect = math.exp(1 - 10 / 7) * (6 / 7 * 4 / 6 * 2 / 5 * 1 / 4) ** 0.25
    assert bleu(cand, [ref]) == pytest.approx(expect, abs=1e-12)
    assert bleu(cand, [ref]) == pytest.approx(brute_bleu(cand, [ref]), abs=1e-9)


def test_bleu_matches_brute_force():
    for cand, refs in random_cases(0):
        for n in (1, 2, 4):
            assert abs(bleu(cand, refs, max_n=n) - brute_bleu(cand, refs, max_n=n)) <= 1e-9


def test_corpus_bleu_matches_brute_force():
    cases = list(random_cases(1))
    for i in range(0, 50, 5):
        cands = [c for c, _ in cases[i:i + 5]]
        refs = [r for _, r in cases[i:i + 5]]
        for n in (1, 2, 4):
            assert abs(corpus_bleu(cands, refs, n) - brute_corpus_bleu(cands, refs, n)) <= 1e-9


def test_div_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(50):
        caps = [rng.integers(0, 4, int(rng.integers(2, 7))).tolist() for _ in range(int(rng.integers(1, 5)))]
        for n in (1, 2):
            assert abs(div_n(caps, n) - brute_div(caps, n)) <= 1e-9


def test_closest_reference_ties_go_short():
    # candidate length 3, refs of length 2 and 4: the shorter one sets bp
    cand = [1, 2, 3]
    assert bleu(cand, [[1, 2], [1, 2, 3, 4]], max_n=1) == 1.0
    assert bleu(cand, [[1, 2, 3, 4], [1, 2]], max_n=1) == 1.0


@given(st.lists(st.integers(0, 40), max_size=60))
def test_histogram_counts_everything(lengths):
    h = length_histogram(lengths, PLAN)
    assert sum(h.values()) == len(lengths)
    assert h[0] == sum(1 for n in lengths if n == 0 or n > 25)


def test_histogram_buckets():
    h = length_histogram([1, 9, 10, 14, 15, 19, 20, 25, 0, 30], PLAN)
    assert h == {0: 2, 1: 2, 2: 2, 3: 2, 4: 2}
