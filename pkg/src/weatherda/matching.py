"""Prediction-to-target assignment and teacher pseudo-label filtering."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .core import Box3D, Detection, DomainTag, label_record
from .geometry import iou_3d, nms

PROB_FLOOR = 1e-7

Label = tuple[Box3D, int]


def cost_matrix(preds: Sequence[Detection], targets: Sequence[Label], lambda_box: float = 2.0,
                iou_fn: Callable[[Box3D, Box3D], float] = iou_3d) -> np.ndarray:
    """C[i, j] = -log p_i(class of j) + lambda_box * (1 - IoU(box_i, box_j))."""
    if lambda_box < 0:
        raise ValueError("lambda_box must be non-negative")
    cost = np.zeros((len(preds), len(targets)))
    for i, d in enumerate(preds):
        for j, (box, cat) in enumerate(targets):
            p = max(d.probs[cat], PROB_FLOOR)
            cost[i, j] = -math.log(p) + lambda_box * (1.0 - iou_fn(d.box, box))
    return cost


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of size min(rows, cols).

    Shortest-augmenting-path form of Kuhn's method with row/column
    potentials; O(n^2 m) for an n x m matrix with n <= m.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if c.size == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("cost entries must be finite")
    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    n, m = c.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # 1-based row matched to column j, 0 if free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j]]
    if transposed:
        pairs = [(b, a) for a, b in pairs]
    return sorted(pairs)


def assignment_cost(cost, pairs) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[i, j] for i, j in pairs))


def filter_pseudo_labels(teacher_dets: Sequence[Detection], beta: float = 0.9,
                         nms_threshold: float = 0.2,
                         iou_fn: Callable[[Box3D, Box3D], float] = iou_3d) -> list[Label]:
    """NMS, then drop detections whose confidence is below ``beta``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    kept = nms(teacher_dets, nms_threshold, iou_fn)
    return [(d.box, d.category) for d in kept if d.confidence >= beta]


def pseudo_label_records(labels: Sequence[Label], teacher_iteration: int, beta: float,
                         domain: DomainTag | str, **extra) -> list[dict]:
    prov = {"teacher_iteration": int(teacher_iteration), "beta": float(beta)}
    return [label_record(b, c, domain, provenance=prov, **extra) for b, c in labels]
