import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from weatherda.core import (Box3D, Detection, DomainTag, LabeledFrame, QueryBatch,
                            detection_from_logits, label_record, normalize_yaw, read_jsonl,
                            softmax, write_jsonl)

from conftest import boxes, finite


@pytest.mark.parametrize("angle, expected", [(0.0, 0.0), (3 * math.pi, -math.pi),
                                             (-math.pi / 2, -math.pi / 2)])
def test_normalize_yaw_examples(angle, expected):
    assert normalize_yaw(angle) == pytest.approx(expected, abs=1e-12)


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_normalize_yaw_range_and_congruence(a):
    y = normalize_yaw(a)
    assert -math.pi <= y < math.pi
    k = (a - y) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-9


@pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
def test_normalize_yaw_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        normalize_yaw(bad)


def test_detection_from_logits_examples():
    box = Box3D(0, 0, 0, 1, 1, 1)
    d = detection_from_logits([0.0] * 4, box)
    assert np.allclose(d.probs, 0.25) and d.confidence == pytest.approx(0.25)
    d = detection_from_logits([math.log(9), 0.0], box)
    assert np.allclose(d.probs, (0.9, 0.1)) and d.confidence == pytest.approx(0.9)
    d = detection_from_logits([50.0, 0.0], box)
    assert d.confidence >= 1 - 1e-6


@given(st.lists(finite, min_size=1, max_size=8))
def test_softmax_sums_to_one(z):
    assert abs(softmax(z).sum() - 1.0) <= 1e-6
    d = detection_from_logits(z, Box3D(0, 0, 0, 1, 1, 1))
    assert d.confidence == max(d.probs)


@pytest.mark.parametrize("field", ["w", "h", "l"])
@pytest.mark.parametrize("value", [0.0, -1.0])
def test_box_rejects_non_positive_extent(field, value):
    kw = dict(x=0, y=0, z=0, w=1, h=1, l=1, yaw=0)
    kw[field] = value
    with pytest.raises(ValueError):
        Box3D(**kw)


@pytest.mark.parametrize("field", ["x", "yaw", "w"])
def test_box_rejects_non_finite(field):
    kw = dict(x=0, y=0, z=0, w=1, h=1, l=1, yaw=0)
    kw[field] = math.nan
    with pytest.raises(ValueError):
        Box3D(**kw)


def test_detection_rejects_bad_probs():
    box = Box3D(0, 0, 0, 1, 1, 1)
    with pytest.raises(ValueError):
        Detection(box, (0.5, 0.6))
    with pytest.raises(ValueError):
        Detection(box, (1.2, -0.2))


def test_background_detection_confidence_ignores_background():
    d = Detection(Box3D(0, 0, 0, 1, 1, 1), (0.1, 0.2, 0.7), background=True)
    assert d.confidence == pytest.approx(0.2) and d.category == 1 and d.num_classes == 2


@given(boxes(), st.lists(st.floats(0.01, 10), min_size=2, max_size=5), st.sampled_from(list(DomainTag)))
def test_detection_jsonl_roundtrip_is_bit_exact(box, weights, domain):
    p = np.asarray(weights) / np.sum(weights)
    d = Detection(box, tuple(p))
    rec = json.loads(json.dumps(d.to_record(domain)))
    back = Detection.from_record(rec)
    assert back.box == box and back.probs == d.probs
    assert rec["domain"] == domain.value


def test_jsonl_file_roundtrip(tmp_path):
    box = Box3D(1.5, -2.25, 0.5, 1.9, 1.6, 4.4, 0.3)
    recs = [label_record(box, 2, "night", frame=7)]
    write_jsonl(tmp_path / "l.jsonl", recs)
    back = read_jsonl(tmp_path / "l.jsonl")
    assert back == recs and Box3D.from_dict(back[0]) == box


def test_domain_labels():
    assert DomainTag.SOURCE.label == 0
    assert all(d.label == 1 for d in DomainTag if d.is_target)
    assert DomainTag.parse("Night") is DomainTag.NIGHT
    with pytest.raises(ValueError):
        DomainTag.parse("snow")


def test_labeled_frame_category_range():
    box = Box3D(0, 0, 0, 1, 1, 1)
    LabeledFrame("a", ((box, 2),), DomainTag.SOURCE)
    with pytest.raises(ValueError):
        LabeledFrame("a", ((box, 3),), DomainTag.SOURCE)
    assert LabeledFrame("t", (), DomainTag.RAIN).labels == ()


def test_query_batch_shapes():
    box = Box3D(0, 0, 0, 1, 1, 1)
    qb = QueryBatch(np.ones((2, 4)), np.zeros((2, 4)), (box, box), DomainTag.SOURCE)
    assert np.allclose(qb.probs().sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        QueryBatch(np.ones((2, 4)), np.zeros((3, 4)), (box, box), DomainTag.SOURCE)
