"""A toy query detector standing in for a multi-view transformer detector.

Every query owns one BEV cell (its reference point). The cell descriptor is
encoded by a shared two-layer MLP, a learned per-query embedding is added,
and linear heads emit K + 1 class logits (background last) and a box
``(dx, dy, z, log w, log h, log l, sin yaw, cos yaw)`` relative to the
reference point. The box head additionally sees the cell's geometry
channels through a linear skip.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .. import grad as G
from ..core import Box3D, DomainTag, QueryBatch
from .scenes import CHANNELS, GEOMETRY, NUM_CLASSES, SceneConfig, ToyScene

BOX_DIM = 8
BACKGROUND_PRIOR = 0.8


def init_detector_params(rng: np.random.Generator, hidden: int = 32, feature_dim: int = 16,
                         num_queries: int = 16, num_classes: int = NUM_CLASSES,
                         in_dim: int = CHANNELS) -> dict[str, np.ndarray]:
    def he(fan_in, shape):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    # most queries are empty: start at background probability BACKGROUND_PRIOR
    cls_bias = np.zeros(num_classes + 1)
    cls_bias[-1] = np.log(BACKGROUND_PRIOR * num_classes / (1.0 - BACKGROUND_PRIOR))
    bias_box = np.zeros(BOX_DIM)
    bias_box[2] = 0.8
    # start wide so each query overlaps any object in its own cell
    bias_box[3:6] = np.log([2.5, 1.5, 2.5])
    bias_box[7] = 1.0
    return {
        "enc.w1": he(in_dim, (in_dim, hidden)),
        "enc.b1": np.zeros(hidden),
        "enc.w2": he(hidden, (hidden, feature_dim)),
        "enc.b2": np.zeros(feature_dim),
        "query.embed": rng.normal(0.0, 0.1, (num_queries, feature_dim)),
        # zero so the first matches are decided by overlap alone
        "cls.w": np.zeros((feature_dim, num_classes + 1)),
        "cls.b": cls_bias,
        "box.w": rng.normal(0.0, 0.01, (feature_dim, BOX_DIM)),
        "box.skip": np.zeros((GEOMETRY.stop - GEOMETRY.start, BOX_DIM)),
        "box.b": bias_box,
    }


class DetectorOutput:
    """Stacked per-query outputs for a list of scenes."""

    def __init__(self, features: G.Node, logits: G.Node, box_params: G.Node,
                 scenes: Sequence[ToyScene], num_queries: int):
        self.features = features
        self.logits = logits
        self.box_params = box_params
        self.scenes = list(scenes)
        self.num_queries = num_queries

    def frame_slice(self, i: int) -> slice:
        return slice(i * self.num_queries, (i + 1) * self.num_queries)

    def boxes(self, rows: slice | None = None) -> tuple[Box3D, ...]:
        p = self.box_params.value if rows is None else self.box_params.value[rows]
        return tuple(params_to_box(r) for r in p)

    def query_batch(self, domain: DomainTag | None = None, rows: slice | None = None) -> QueryBatch:
        """All queries (or a row range) as a QueryBatch; the nodes stay in the graph."""
        domain = domain or (self.scenes[0].domain if self.scenes else DomainTag.SOURCE)
        if rows is None:
            f, z, b = self.features, self.logits, self.box_params
        else:
            idx = np.arange(rows.start, rows.stop)
            f, z, b = (G.gather_rows(n, idx) for n in (self.features, self.logits, self.box_params))
        return QueryBatch(f, z, self.boxes(rows), domain, background=True, box_params=b)

    def frame(self, i: int) -> QueryBatch:
        return self.query_batch(self.scenes[i].domain, self.frame_slice(i))


def params_to_box(row: np.ndarray) -> Box3D:
    x, y, z, w, h, l, s, c = (float(v) for v in row)
    yaw = float(np.arctan2(s, c)) if (s or c) else 0.0
    return Box3D(x, y, z, max(w, 1e-6), max(h, 1e-6), max(l, 1e-6), yaw)


def box_to_params(box: Box3D) -> np.ndarray:
    return np.array([box.x, box.y, box.z, box.w, box.h, box.l, np.sin(box.yaw), np.cos(box.yaw)])


class ToyDetector:
    def __init__(self, scene_cfg: SceneConfig | None = None):
        self.scene_cfg = scene_cfg or SceneConfig()
        self.num_queries = self.scene_cfg.num_cells
        self._ref = np.zeros((self.num_queries, BOX_DIM))
        self._ref[:, :2] = self.scene_cfg.cell_centers()

    def forward(self, params: Mapping[str, G.Node | np.ndarray],
                scenes: Sequence[ToyScene]) -> DetectorOutput:
        p = {k: G.as_node(v) for k, v in params.items()}
        x = np.concatenate([s.descriptor for s in scenes], axis=0)
        slots = np.tile(np.arange(self.num_queries), len(scenes))
        h = G.relu(G.matmul(x, p["enc.w1"]) + p["enc.b1"])
        f = G.matmul(h, p["enc.w2"]) + p["enc.b2"] + G.gather_rows(p["query.embed"], slots)
        logits = G.matmul(f, p["cls.w"]) + p["cls.b"]
        # the box head also reads the raw geometry cues of its cell
        raw = G.matmul(f, p["box.w"]) + G.matmul(x[:, GEOMETRY], p["box.skip"]) + p["box.b"]
        # exp on the three log-extents only; other columns pass through
        mask = np.zeros(BOX_DIM)
        mask[3:6] = 1.0
        extents = G.exp(raw * mask) * mask
        box = raw * (1.0 - mask) + extents + np.tile(self._ref, (len(scenes), 1))
        return DetectorOutput(f, logits, box, scenes, self.num_queries)
