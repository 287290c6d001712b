"""Distance-threshold mAP and translation error, nuScenes style, plus feature export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Box3D, Detection, QueryBatch

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
RECALL_POINTS = np.linspace(0.0, 1.0, 101)

Label = tuple[Box3D, int]


@dataclass
class Matches:
    tp: np.ndarray          # bool per prediction, input order
    gt_index: np.ndarray    # matched ground-truth index or -1
    distance: np.ndarray    # ground-plane distance for matches, nan otherwise


def _rank(preds: Sequence[Detection]) -> list[int]:
    # confidence first; the box breaks ties so the order never depends on list position
    return sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].box.x,
                                                    preds[i].box.y, preds[i].box.z,
                                                    preds[i].category))


def match_by_center_distance(preds: Sequence[Detection], gts: Sequence[Label],
                             threshold: float) -> Matches:
    """Greedy matching by confidence: each prediction takes the nearest free
    same-category ground truth within ``threshold`` metres (ground plane)."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    n = len(preds)
    tp = np.zeros(n, dtype=bool)
    gt_index = np.full(n, -1, dtype=np.int64)
    dist = np.full(n, np.nan)
    taken = [False] * len(gts)
    for i in _rank(preds):
        d = preds[i]
        best, best_j = math.inf, -1
        for j, (box, cat) in enumerate(gts):
            if taken[j] or cat != d.category:
                continue
            dd = math.hypot(d.box.x - box.x, d.box.y - box.y)
            if dd < best:
                best, best_j = dd, j
        if best_j >= 0 and best <= threshold:
            taken[best_j] = True
            tp[i] = True
            gt_index[i] = best_j
            dist[i] = best
    return Matches(tp, gt_index, dist)


def average_precision(confidences, tp, n_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve.

    Predictions are ranked by confidence; tied confidences form a single
    operating point. Returns nan when there is no ground truth.
    """
    if n_gt <= 0:
        return float("nan")
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(tp, dtype=bool)
    if conf.size == 0 or not hits.any():
        return 0.0
    order = np.argsort(-conf, kind="mergesort")
    conf, hits = conf[order], hits[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(~hits)
    # last index of each run of equal confidence
    last = np.r_[np.flatnonzero(np.diff(conf) != 0), conf.size - 1]
    recall = ctp[last] / n_gt
    precision = ctp[last] / (ctp[last] + cfp[last])
    # monotone envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        ap += envelope[idx] if idx < envelope.size else 0.0
    return float(ap / RECALL_POINTS.size)


@dataclass
class EvalResult:
    ap: dict[int, dict[float, float]]
    mAP: float
    mATE: float
    n_tp: int
    excluded: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "mAP": clean(self.mAP),
            "mATE": clean(self.mATE),
            "n_tp": self.n_tp,
            "excluded_categories": list(self.excluded),
            "ap": {str(k): {str(t): clean(v) for t, v in d.items()} for k, d in self.ap.items()},
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def evaluate(frames: Sequence[tuple[Sequence[Detection], Sequence[Label]]], num_classes: int,
             thresholds: Sequence[float] = DIST_THRESHOLDS) -> EvalResult:
    """mAP over categories and distance thresholds; mATE over 2 m matches."""
    n_gt = np.zeros(num_classes, dtype=np.int64)
    for _, gts in frames:
        for _, c in gts:
            n_gt[c] += 1
    excluded = [k for k in range(num_classes) if n_gt[k] == 0]
    ap: dict[int, dict[float, float]] = {k: {} for k in range(num_classes)}
    tp_dist: list[float] = []
    for thr in thresholds:
        conf = [[] for _ in range(num_classes)]
        hit = [[] for _ in range(num_classes)]
        for preds, gts in frames:
            m = match_by_center_distance(preds, gts, thr)
            for d, t in zip(preds, m.tp):
                conf[d.category].append(d.confidence)
                hit[d.category].append(bool(t))
            if thr == TP_THRESHOLD:
                tp_dist.extend(m.distance[m.tp].tolist())
        for k in range(num_classes):
            ap[k][thr] = average_precision(conf[k], hit[k], int(n_gt[k]))
    if TP_THRESHOLD not in thresholds:
        for preds, gts in frames:
            m = match_by_center_distance(preds, gts, TP_THRESHOLD)
            tp_dist.extend(m.distance[m.tp].tolist())
    vals = [v for k in range(num_classes) if k not in excluded for v in ap[k].values()]
    m_ap = float(np.mean(vals)) if vals else float("nan")
    m_ate = float(np.mean(tp_dist)) if tp_dist else float("nan")
    return EvalResult(ap, m_ap, m_ate, len(tp_dist), excluded)


def export_features(queries: Sequence[QueryBatch], path) -> int:
    """Write one CSV row per query: domain, predicted class, confidence, features."""
    if not queries:
        raise ValueError("nothing to export")
    dim = queries[0].feature_values().shape[1]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "predicted_class", "confidence"] + [f"f{i}" for i in range(dim)])
        for qb in queries:
            conf, cls = qb.confidences_and_classes()
            for f, c, k in zip(qb.feature_values(), conf, cls):
                w.writerow([qb.domain.value, int(k), repr(float(c))] + [repr(float(v)) for v in f])
                rows += 1
    return rows


def read_features(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            feats = [float(v) for k, v in rec.items() if k.startswith("f")]
            out.append({"domain": rec["domain"], "predicted_class": int(rec["predicted_class"]),
                        "confidence": float(rec["confidence"]), "features": feats})
        return out
