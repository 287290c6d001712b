"""Set-prediction detection loss shared by ground-truth and pseudo-label branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import grad as G
from ..core import Box3D, Detection, QueryBatch
from ..geometry import iou_3d_with_grad
from ..matching import cost_matrix, hungarian
from .detector import box_to_params


class BoxIoU(G.Op):
    """Row-wise 3D IoU of (M, 8) predicted box parameters against fixed targets."""

    name = "box_iou"

    @staticmethod
    def forward(ctx, params, targets=()):
        vals, grads = [], []
        for row, tgt in zip(params, targets):
            v, g = iou_3d_with_grad(row, tgt)
            vals.append(v)
            grads.append(g)
        ctx.jac = np.array(grads).reshape(params.shape)
        return np.array(vals)

    @staticmethod
    def backward(ctx, g):
        return (ctx.jac * g[:, None],)


def box_iou(params, targets: Sequence[Box3D]) -> G.Node:
    return BoxIoU.apply(params, targets=tuple(targets))


@dataclass
class DetectionLossParts:
    total: G.Node
    cls: float
    l1: float
    iou: float
    matched: int


def batched_detection_loss(logits: G.Node, box_params: G.Node | None, boxes: Sequence[Box3D],
                           frames: Sequence[slice], labels: Sequence[Sequence[tuple[Box3D, int]]],
                           lambda_box: float = 2.0, num_classes: int | None = None,
                           use_iou: bool = True,
                           cls_weight: np.ndarray | None = None) -> DetectionLossParts:
    """Sum over frames of the Hungarian-matched set loss.

    Matched queries pay cross-entropy to their label class, L1 on
    (x, y, z, w, h, l, sin yaw, cos yaw) and 1 - IoU; every other query pays
    cross-entropy to the background class (index K, the last logit).
    ``cls_weight`` scales the cross-entropy of unmatched rows (a bool mask
    drops rows where it is False); matched rows always count fully.
    """
    z = logits.value
    K = z.shape[1] - 1 if num_classes is None else num_classes
    e = np.exp(z - z.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)

    target_cls = np.full(z.shape[0], K, dtype=np.int64)
    rows, tgt_boxes = [], []
    for sl, labs in zip(frames, labels):
        if not labs:
            continue
        dets = [Detection(boxes[r], tuple(probs[r]), background=True) for r in range(sl.start, sl.stop)]
        pairs = hungarian(cost_matrix(dets, labs, lambda_box))
        for i, j in pairs:
            target_cls[sl.start + i] = labs[j][1]
            rows.append(sl.start + i)
            tgt_boxes.append(labs[j][0])
    onehot = np.zeros_like(z)
    onehot[np.arange(z.shape[0]), target_cls] = 1.0
    if cls_weight is not None:
        keep = np.asarray(cls_weight, dtype=np.float64).copy()
        keep[rows] = 1.0
        onehot *= keep[:, None]
    cls_loss = -G.sum_(G.log_softmax(logits) * onehot)
    total = cls_loss
    l1_val = iou_val = 0.0
    if rows and box_params is not None:
        pred = G.gather_rows(box_params, rows)
        tgt = np.stack([box_to_params(b) for b in tgt_boxes])
        l1 = G.sum_(G.abs_(pred - tgt))
        total = total + l1
        l1_val = float(l1.value)
        if use_iou:
            iou_term = G.sum_(1.0 - box_iou(pred, tgt_boxes))
            total = total + iou_term
            iou_val = float(iou_term.value)
    return DetectionLossParts(total, float(cls_loss.value), l1_val, iou_val, len(rows))


def detection_loss(preds: QueryBatch, labels: Sequence[tuple[Box3D, int]],
                   lambda_box: float = 2.0) -> G.Node:
    logits = G.as_node(preds.logits)
    n = logits.shape[0]
    box = None if preds.box_params is None else G.as_node(preds.box_params)
    parts = batched_detection_loss(logits, box, preds.boxes, [slice(0, n)], [list(labels)],
                                   lambda_box)
    return parts.total
