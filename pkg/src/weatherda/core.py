"""Shared value types: boxes, detections, domain tags, frames and query batches."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class DomainTag(enum.Enum):
    SOURCE = "source"
    NIGHT = "night"
    RAIN = "rain"
    HAZE = "haze"

    @property
    def is_target(self) -> bool:
        return self is not DomainTag.SOURCE

    @property
    def label(self) -> int:
        """Binary adversarial label: 0 for source, 1 for any target condition."""
        return 0 if self is DomainTag.SOURCE else 1

    @classmethod
    def parse(cls, value: "str | DomainTag") -> "DomainTag":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown domain {value!r}; expected one of "
                             f"{[d.value for d in cls]}") from None


TARGET_DOMAINS = (DomainTag.NIGHT, DomainTag.RAIN, DomainTag.HAZE)


def normalize_yaw(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    angle = float(angle)
    if not math.isfinite(angle):
        raise ValueError(f"non-finite angle {angle}")
    out = (angle + math.pi) % TWO_PI - math.pi
    # float modulo can land exactly on +pi after the shift
    if out >= math.pi:
        out -= TWO_PI
    return out


def softmax(logits: Sequence[float]) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "w", "h", "l", "yaw"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"Box3D.{name} must be finite, got {v}")
            object.__setattr__(self, name, v)
        for name in ("w", "h", "l"):
            if getattr(self, name) <= 0:
                raise ValueError(f"Box3D.{name} must be positive")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def volume(self) -> float:
        return self.w * self.h * self.l

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    def to_dict(self) -> dict[str, float]:
        return {"x": self.x, "y": self.y, "z": self.z,
                "w": self.w, "h": self.h, "l": self.l, "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Box3D":
        return cls(d["x"], d["y"], d["z"], d["w"], d["h"], d["l"], d.get("yaw", 0.0))


@dataclass(frozen=True)
class Detection:
    """A box with a class distribution.

    ``probs`` sums to one. When ``background`` is set, the last entry is the
    background class and ``confidence``/``category`` only look at the
    foreground entries; otherwise ``confidence == max(probs)``.
    """

    box: Box3D
    probs: tuple[float, ...]
    confidence: float = field(default=-1.0)
    background: bool = False

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0 or (self.background and p.size < 2):
            raise ValueError("probs must be a non-empty vector")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("probs must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError(f"probs must sum to 1, got {p.sum()}")
        object.__setattr__(self, "probs", tuple(float(v) for v in p))
        conf = float(self.foreground.max())
        if self.confidence >= 0 and abs(self.confidence - conf) > 1e-12:
            raise ValueError("confidence must equal the max foreground probability")
        object.__setattr__(self, "confidence", conf)

    @property
    def foreground(self) -> np.ndarray:
        p = np.asarray(self.probs)
        return p[:-1] if self.background else p

    @property
    def num_classes(self) -> int:
        return len(self.probs) - (1 if self.background else 0)

    @property
    def category(self) -> int:
        return int(np.argmax(self.foreground))

    def to_record(self, domain: DomainTag | str = DomainTag.SOURCE, **extra) -> dict:
        rec = self.box.to_dict()
        rec["probs"] = list(self.probs)
        rec["domain"] = DomainTag.parse(domain).value
        if self.background:
            rec["background"] = True
        rec.update(extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        return cls(Box3D.from_dict(rec), tuple(rec["probs"]),
                   background=bool(rec.get("background", False)))


def detection_from_logits(logits: Sequence[float], box: Box3D, background: bool = False) -> Detection:
    return Detection(box, tuple(softmax(logits)), background=background)


@dataclass(frozen=True)
class LabeledFrame:
    """One frame: a reference to its image or toy scene, labels, and domain."""

    ref: str
    labels: tuple[tuple[Box3D, int], ...]
    domain: DomainTag
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple((b, int(c)) for b, c in self.labels))
        for _, c in self.labels:
            if not 0 <= c < self.num_classes:
                raise ValueError(f"category {c} outside [0, {self.num_classes})")


@dataclass(frozen=True)
class QueryBatch:
    """Per-query outputs of a detector for one or more frames of one domain.

    ``features`` and ``logits`` may be plain arrays or autodiff nodes; any
    object with a ``.value`` array is unwrapped by :meth:`feature_values`
    and :meth:`logit_values`. ``boxes`` are the decoded boxes as values.
    """

    features: Any
    logits: Any
    boxes: tuple[Box3D, ...]
    domain: DomainTag
    background: bool = True
    box_params: Any = None  # optional (N_Q, 8) x, y, z, w, h, l, sin, cos; differentiable

    def __post_init__(self):
        f, z = self.feature_values(), self.logit_values()
        if f.ndim != 2 or z.ndim != 2:
            raise ValueError("features and logits must be 2-D")
        if f.shape[0] != z.shape[0] or len(self.boxes) != f.shape[0]:
            raise ValueError("features, logits and boxes disagree on N_Q")
        if not np.all(np.isfinite(z)):
            raise ValueError("logits must be finite")

    @staticmethod
    def _value(a) -> np.ndarray:
        return np.asarray(getattr(a, "value", a), dtype=np.float64)

    def feature_values(self) -> np.ndarray:
        return self._value(self.features)

    def logit_values(self) -> np.ndarray:
        return self._value(self.logits)

    def __len__(self) -> int:
        return len(self.boxes)

    def probs(self) -> np.ndarray:
        z = self.logit_values()
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def confidences_and_classes(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.probs()
        fg = p[:, :-1] if self.background else p
        return fg.max(axis=1), fg.argmax(axis=1)

    def detections(self) -> list[Detection]:
        return [Detection(b, tuple(p), background=self.background)
                for b, p in zip(self.boxes, self.probs())]


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def label_record(box: Box3D, category: int, domain: DomainTag | str = DomainTag.SOURCE, **extra) -> dict:
    rec = box.to_dict()
    rec["category"] = int(category)
    rec["domain"] = DomainTag.parse(domain).value
    rec.update(extra)
    return rec
