"""Rotated box overlap (polygon clipping) and per-category NMS.

The polygon routines only use ``+ - * /`` and comparisons, so they also run
on :class:`Dual` numbers; :func:`iou_3d_with_grad` relies on this to get an
exact gradient of the IoU with respect to a predicted box.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .core import Box3D, Detection


class Dual:
    """Forward-mode scalar carrying a gradient vector."""

    __slots__ = ("v", "d")

    def __init__(self, v: float, d: np.ndarray):
        self.v = float(v)
        self.d = d

    @staticmethod
    def _lift(o, n):
        return o if isinstance(o, Dual) else Dual(o, np.zeros(n))

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v + o.v, self.d + o.d)
        return Dual(self.v + o, self.d)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v - o.v, self.d - o.d)
        return Dual(self.v - o, self.d)

    def __rsub__(self, o):
        return Dual(o - self.v, -self.d)

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v * o.v, self.d * o.v + o.d * self.v)
        return Dual(self.v * o, self.d * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Dual):
            return Dual(self.v / o.v, (self.d * o.v - o.d * self.v) / (o.v * o.v))
        return Dual(self.v / o, self.d / o)

    def __rtruediv__(self, o):
        return Dual(o / self.v, -o * self.d / (self.v * self.v))

    def __neg__(self):
        return Dual(-self.v, -self.d)

    def __float__(self):
        return self.v

    def _cmp(self, o):
        return o.v if isinstance(o, Dual) else o

    def __lt__(self, o):
        return self.v < self._cmp(o)

    def __le__(self, o):
        return self.v <= self._cmp(o)

    def __gt__(self, o):
        return self.v > self._cmp(o)

    def __ge__(self, o):
        return self.v >= self._cmp(o)

    def __repr__(self):
        return f"Dual({self.v}, {self.d})"


def _sqrt(a):
    if isinstance(a, Dual):
        r = math.sqrt(a.v)
        return Dual(r, a.d / (2.0 * r))
    return math.sqrt(a)


def rect_corners(x, y, w, l, cos_yaw, sin_yaw):
    """Corners of an l (along heading) by w footprint, counter-clockwise."""
    hl, hw = l * 0.5, w * 0.5
    out = []
    for u, v in ((hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)):
        out.append((x + u * cos_yaw - v * sin_yaw, y + u * sin_yaw + v * cos_yaw))
    return out


def bev_corners(box: Box3D) -> np.ndarray:
    """Ground-plane footprint of ``box`` as a (4, 2) array, counter-clockwise."""
    pts = rect_corners(box.x, box.y, box.w, box.l, math.cos(box.yaw), math.sin(box.yaw))
    return np.array(pts, dtype=np.float64)


def polygon_area(poly) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc = acc + (x0 * y1 - x1 * y0)
    return acc * 0.5


def _clip(subject, a, b):
    # keep the part of `subject` left of the directed edge a->b
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        sp, sq = side(p), side(q)
        if sp >= 0:
            out.append(p)
        if (sp >= 0) != (sq >= 0):
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clipping of convex ``subject`` by convex CCW ``clipper``."""
    poly = list(subject)
    n = len(clipper)
    for i in range(n):
        if len(poly) < 3:
            return []
        poly = _clip(poly, clipper[i], clipper[(i + 1) % n])
    return poly


def convex_intersection_area(a, b) -> float:
    """Area of the intersection of two convex counter-clockwise polygons."""
    a = [tuple(p) for p in a]
    b = [tuple(p) for p in b]
    inter = clip_polygon(a, b)
    if len(inter) < 3:
        return 0.0
    area = polygon_area(inter)
    return area if area > 0 else 0.0 * area


def _far_apart(a: Box3D, b: Box3D) -> bool:
    ra = 0.5 * math.hypot(a.w, a.l)
    rb = 0.5 * math.hypot(b.w, b.l)
    return math.hypot(a.x - b.x, a.y - b.y) >= ra + rb


def iou_bev(a: Box3D, b: Box3D) -> float:
    if _far_apart(a, b):
        return 0.0
    inter = convex_intersection_area(bev_corners(a), bev_corners(b))
    union = a.w * a.l + b.w * b.l - inter
    return min(1.0, max(0.0, inter / union))


def z_overlap(a: Box3D, b: Box3D) -> float:
    top = min(a.z + a.h / 2, b.z + b.h / 2)
    bottom = max(a.z - a.h / 2, b.z - b.h / 2)
    return max(0.0, top - bottom)


def iou_3d(a: Box3D, b: Box3D) -> float:
    dz = z_overlap(a, b)
    if dz <= 0.0 or _far_apart(a, b):
        return 0.0
    inter = convex_intersection_area(bev_corners(a), bev_corners(b)) * dz
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


def iou_3d_with_grad(params: Sequence[float], target: Box3D) -> tuple[float, np.ndarray]:
    """3D IoU of a box given as ``(x, y, z, w, h, l, sin_yaw, cos_yaw)`` with ``target``.

    Returns the IoU and its gradient with respect to the eight parameters.
    The heading vector is normalised internally, so its scale does not matter.
    """
    n = 8
    p = [Dual(v, np.eye(n)[i]) for i, v in enumerate(params)]
    x, y, z, w, h, l, s, c = p
    if w.v <= 0 or h.v <= 0 or l.v <= 0:
        raise ValueError("box extents must be positive")
    zero = (0.0, np.zeros(n))
    norm = _sqrt(s * s + c * c)
    if norm.v == 0:
        return zero
    ca, sa = c / norm, s / norm

    top = min(z + h * 0.5, target.z + target.h / 2)
    bottom = max(z - h * 0.5, target.z - target.h / 2)
    dz = Dual._lift(top, n) - bottom
    if dz.v <= 0:
        return zero
    ra = 0.5 * math.hypot(w.v, l.v)
    rb = 0.5 * math.hypot(target.w, target.l)
    if math.hypot(x.v - target.x, y.v - target.y) >= ra + rb:
        return zero

    poly_a = rect_corners(x, y, w, l, ca, sa)
    poly_b = [tuple(q) for q in bev_corners(target)]
    inter_poly = clip_polygon(poly_a, poly_b)
    if len(inter_poly) < 3:
        return zero
    area = polygon_area(inter_poly)
    if float(area) <= 0:
        return zero
    inter = Dual._lift(area, n) * dz
    union = w * h * l + target.volume - inter
    iou = inter / union
    return iou.v, iou.d


def nms(dets: Sequence[Detection], iou_threshold: float,
        iou_fn: Callable[[Box3D, Box3D], float] = iou_3d) -> list[Detection]:
    """Greedy per-category suppression, highest confidence first."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    # sorted() is stable, so equal confidences keep input order
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    kept: list[int] = []
    by_cat: dict[int, list[Box3D]] = {}
    for i in order:
        d = dets[i]
        boxes = by_cat.setdefault(d.category, [])
        if all(iou_fn(d.box, b) <= iou_threshold for b in boxes):
            boxes.append(d.box)
            kept.append(i)
    return [dets[i] for i in kept]
