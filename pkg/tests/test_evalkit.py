import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from weatherda.core import Box3D, DomainTag, QueryBatch
from weatherda.evalkit import (DIST_THRESHOLDS, average_precision, evaluate, export_features,
                               match_by_center_distance, read_features)

from conftest import one_hot_detection, random_box


def gt_frame(rng, n=4):
    return [(random_box(rng, 20), int(rng.integers(3))) for _ in range(n)]


def perfect(gts, conf=1.0):
    return [one_hot_detection(b, c, conf=conf) for b, c in gts]


def test_matching_examples():
    box = Box3D(0, 0, 0, 1, 1, 1)
    m = match_by_center_distance(perfect([(box, 0)]), [(box, 0)], 0.5)
    assert m.tp.all() and m.distance[0] == 0
    far = one_hot_detection(Box3D(3, 0, 0, 1, 1, 1), 0)
    assert not match_by_center_distance([far], [(box, 0)], 2.0).tp.any()
    lo = one_hot_detection(Box3D(0.1, 0, 0, 1, 1, 1), 0, conf=0.6)
    hi = one_hot_detection(Box3D(0.3, 0, 0, 1, 1, 1), 0, conf=0.9)
    m = match_by_center_distance([lo, hi], [(box, 0)], 1.0)
    assert list(m.tp) == [False, True]
    with pytest.raises(ValueError):
        match_by_center_distance([], [], 0.0)


def test_ap_examples():
    assert average_precision([0.9, 0.8], [True, True], 2) == 1.0
    assert average_precision([0.9, 0.8], [False, False], 2) == 0.0
    assert math.isnan(average_precision([0.9], [True], 0))
    # (TP, FP, TP, TP) against 3 ground truths, by hand: precision envelope is 1
    # up to recall 1/3 and 3/4 beyond; 34 of the 101 recall points lie at or below 1/3
    got = average_precision([0.9, 0.8, 0.7, 0.6], [True, False, True, True], 3)
    assert got == pytest.approx((34 * 1.0 + 67 * 0.75) / 101, abs=1e-12)


def test_perfect_predictions(rng):
    frames = [(perfect(g), g) for g in (gt_frame(rng) for _ in range(10))]
    res = evaluate(frames, 3)
    assert res.mAP == 1.0 and res.mATE == 0.0
    assert set(res.ap[0]) == set(DIST_THRESHOLDS)


def test_empty_predictions_and_excluded_categories(rng):
    box = Box3D(0, 0, 0, 1, 1, 1)
    res = evaluate([([], [(box, 0)])], 3)
    assert res.mAP == 0.0 and res.excluded == [1, 2] and math.isnan(res.mATE)


@given(st.integers(0, 2**32 - 1))
def test_map_invariant_to_permutation(seed):
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(4):
        gts = gt_frame(rng)
        preds = [one_hot_detection(Box3D(b.x + rng.normal(0, 0.8), b.y + rng.normal(0, 0.8), 0, 1, 1, 1), c,
                                   conf=float(rng.uniform(0.34, 1))) for b, c in gts]
        frames.append((preds, gts))
    base = evaluate(frames, 3)
    shuffled = [([p[i] for i in rng.permutation(len(p))], g) for p, g in frames]
    other = evaluate(shuffled, 3)
    assert other.mAP == pytest.approx(base.mAP, abs=1e-12)
    assert (math.isnan(base.mATE) and math.isnan(other.mATE)) or other.mATE == pytest.approx(base.mATE, abs=1e-12)


def test_mate_is_mean_distance(rng):
    gts = gt_frame(rng, 6)
    preds = [one_hot_detection(Box3D(b.x + 0.3 * i / 6, b.y - 0.1, 0, 1, 1, 1), c) for i, (b, c) in enumerate(gts)]
    res = evaluate([(preds, gts)], 3)
    m = match_by_center_distance(preds, gts, 2.0)
    assert res.mATE == pytest.approx(float(np.mean(m.distance[m.tp])), abs=1e-12)


def test_low_confidence_false_positive_never_raises_ap():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        conf = rng.uniform(0.2, 1.0, n)
        tp = rng.random(n) < 0.6
        n_gt = int(tp.sum() + rng.integers(0, 3)) or 1
        floor = conf[tp].min() if tp.any() else conf.min()
        extra = rng.uniform(0.0, floor) * 0.999
        base = average_precision(conf, tp, n_gt)
        more = average_precision(np.r_[conf, extra], np.r_[tp, False], n_gt)
        assert more <= base + 1e-12


def test_feature_export_roundtrip(tmp_path, rng):
    box = Box3D(0, 0, 0, 1, 1, 1)
    f = rng.normal(size=(5, 3))
    qb = QueryBatch(f, rng.normal(size=(5, 4)), (box,) * 5, DomainTag.HAZE)
    path = tmp_path / "f.csv"
    assert export_features([qb], path) == 5
    rows = read_features(path)
    assert len(rows) == 5 and all(r["domain"] == "haze" for r in rows)
    assert np.array_equal(np.array([r["features"] for r in rows]), f)
    conf, cls = qb.confidences_and_classes()
    assert [r["predicted_class"] for r in rows] == cls.tolist()
    with pytest.raises(ValueError):
        export_features([], path)
