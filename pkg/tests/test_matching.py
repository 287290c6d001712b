import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from weatherda.core import Box3D, Detection
from weatherda.matching import (assignment_cost, cost_matrix, filter_pseudo_labels, hungarian,
                                pseudo_label_records)

from conftest import one_hot_detection
from test_geometry import detections


def brute_force(cost):
    c = np.asarray(cost)
    m, n = c.shape
    if m <= n:
        return min(sum(c[i, p[i]] for i in range(m)) for p in itertools.permutations(range(n), m))
    return brute_force(c.T)


def test_hungarian_examples():
    assert hungarian([[1, 2], [2, 1]]) == [(0, 0), (1, 1)]
    assert hungarian([[2, 1], [1, 2]]) == [(0, 1), (1, 0)]
    assert hungarian(np.zeros((0, 3))) == []


def test_hungarian_matches_brute_force_5x5(rng):
    for _ in range(200):
        c = rng.uniform(0, 10, (5, 5))
        pairs = hungarian(c)
        assert len(pairs) == 5
        assert assignment_cost(c, pairs) == pytest.approx(brute_force(c), abs=1e-9)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_hungarian_rectangular_optimal_and_injective(m, n, seed):
    c = np.random.default_rng(seed).normal(size=(m, n)) * 5
    pairs = hungarian(c)
    assert len(pairs) == min(m, n)
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
    assert assignment_cost(c, pairs) == pytest.approx(brute_force(c), abs=1e-9)


def test_hungarian_beats_random_assignments(rng):
    for _ in range(1000):
        m, n = rng.integers(1, 8, 2)
        c = rng.uniform(0, 1, (m, n))
        best = assignment_cost(c, hungarian(c))
        k = min(m, n)
        rows, cols = rng.permutation(m)[:k], rng.permutation(n)[:k]
        assert best <= assignment_cost(c, zip(rows, cols)) + 1e-12


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_hungarian_row_column_shift_invariance(m, n, seed):
    rng = np.random.default_rng(seed)
    c = rng.permutation(m * n).reshape(m, n).astype(float)  # distinct totals keep the optimum unique
    c = 2.0 ** c
    base = hungarian(c)
    shifted = c.copy()
    if m <= n:
        shifted[rng.integers(m)] += rng.normal() * 100  # every row is assigned
    else:
        shifted[:, rng.integers(n)] += rng.normal() * 100
    assert hungarian(shifted) == base


def test_hungarian_rejects_non_finite():
    with pytest.raises(ValueError):
        hungarian([[1.0, math.inf]])


def test_cost_matrix_examples():
    box = Box3D(0, 0, 0, 1, 1, 1)
    perfect = one_hot_detection(box, 0, num_classes=2)
    assert cost_matrix([perfect], [(box, 0)])[0, 0] == pytest.approx(0.0)
    half = Detection(box, (0.5, 0.5))
    shifted = Box3D(1 / 3, 0, 0, 1, 1, 1)  # IoU 0.5 against the unit cube
    assert cost_matrix([half], [(shifted, 0)], 2.0)[0, 0] == pytest.approx(math.log(2) + 1, abs=1e-9)
    far = Box3D(10, 0, 0, 1, 1, 1)
    assert cost_matrix([perfect], [(far, 0)], 2.0)[0, 0] == pytest.approx(2.0)
    assert cost_matrix([], [(box, 0)]).shape == (0, 1)
    # a zero probability is floored, so the entry stays finite
    assert np.isfinite(cost_matrix([perfect], [(box, 1)])[0, 0])


@given(st.floats(0.01, 0.98), st.floats(0.0, 0.01), st.floats(0, 0.9), st.floats(0, 0.1))
def test_cost_monotone(p, dp, shift, dshift):
    tgt = Box3D(0, 0, 0, 1, 1, 1)

    def c(prob, s):
        return cost_matrix([Detection(Box3D(s, 0, 0, 1, 1, 1), (prob, 1 - prob))], [(tgt, 0)])[0, 0]

    # higher probability or larger overlap (smaller shift) never costs more
    assert c(p + dp, shift) <= c(p, shift) + 1e-12
    assert c(p, max(0.0, shift - dshift)) <= c(p, shift) + 1e-12


def test_filter_pseudo_labels_examples():
    a = one_hot_detection(Box3D(0, 0, 0, 1, 1, 1), 0, conf=0.95)
    b = one_hot_detection(Box3D(5, 0, 0, 1, 1, 1), 1, conf=0.5)
    assert filter_pseudo_labels([a, b], 0.9) == [(a.box, 0)]
    assert len(filter_pseudo_labels([a, b], 0.0)) == 2
    assert filter_pseudo_labels([a, b], 1.0) == []
    with pytest.raises(ValueError):
        filter_pseudo_labels([a], 1.01)


@given(detections(), st.floats(0, 1), st.floats(0, 1))
def test_filter_monotone_in_beta(dets, b1, b2):
    lo, hi = sorted((b1, b2))
    assert len(filter_pseudo_labels(dets, hi)) <= len(filter_pseudo_labels(dets, lo))


@given(detections(), st.floats(0, 1), st.floats(0, 1))
def test_threshold_commutes_with_nms(dets, beta, thr):
    from weatherda.geometry import nms

    nms_first = filter_pseudo_labels(dets, beta, thr)
    thresh_first = [(d.box, d.category) for d in nms([d for d in dets if d.confidence >= beta], thr)]
    assert nms_first == thresh_first


def test_pseudo_label_provenance():
    recs = pseudo_label_records([(Box3D(0, 0, 0, 1, 1, 1), 2)], 17, 0.9, "rain")
    assert recs[0]["provenance"] == {"teacher_iteration": 17, "beta": 0.9}
    assert recs[0]["category"] == 2 and recs[0]["domain"] == "rain"
