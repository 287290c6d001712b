"""Query-level domain alignment: class centers, adversarial and contrastive losses.

Class centers are means of L2-normalised features of confident queries,
grouped by predicted category. Source and target centers go through a
gradient-reversal layer into a small MLP domain discriminator. A global
per-category memory accumulates centers with count-adaptive weights and
anchors a temperature-scaled contrastive loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import grad as G
from .core import DomainTag, QueryBatch

log = logging.getLogger(__name__)


@dataclass
class ClassCenters:
    domain: DomainTag
    centers: dict[int, G.Node] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    n_zero_norm: int = 0

    def __contains__(self, k: int) -> bool:
        return k in self.centers

    def categories(self) -> list[int]:
        return sorted(self.centers)

    def values(self) -> dict[int, np.ndarray]:
        return {k: c.value.copy() for k, c in self.centers.items()}


def class_centers(queries: QueryBatch, gamma: float = 0.5) -> ClassCenters:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    out = ClassCenters(queries.domain)
    conf, cls = queries.confidences_and_classes()
    feats = G.as_node(queries.features)
    norms = np.linalg.norm(feats.value, axis=1)
    confident = conf >= gamma
    zero = confident & (norms == 0)
    out.n_zero_norm = int(zero.sum())
    if out.n_zero_norm:
        log.warning("class_centers: skipped %d zero-norm query features", out.n_zero_norm)
    keep = np.flatnonzero(confident & (norms > 0))
    if keep.size == 0:
        return out
    unit = G.l2_normalize(G.gather_rows(feats, keep))
    kept_cls = cls[keep]
    for k in np.unique(kept_cls):
        rows = np.flatnonzero(kept_cls == k)
        out.centers[int(k)] = G.mean(G.gather_rows(unit, rows), axis=0)
        out.counts[int(k)] = int(rows.size)
    return out


class DomainDiscriminator:
    """One-hidden-layer MLP giving the logit of P(target | center)."""

    def __init__(self, params: dict[str, G.Node]):
        self.params = params

    @classmethod
    def init(cls, dim: int, hidden: int = 64, rng: np.random.Generator | None = None,
             prefix: str = "disc.") -> "DomainDiscriminator":
        rng = rng or np.random.default_rng(0)
        p = {
            "w1": rng.normal(0.0, np.sqrt(2.0 / dim), (dim, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, 1)),
            "b2": np.zeros(1),
        }
        return cls({prefix + k: G.parameter(v, prefix + k) for k, v in p.items()})

    def _p(self, key):
        return next(v for k, v in self.params.items() if k.endswith(key))

    def logits(self, x) -> G.Node:
        h = G.relu(G.matmul(x, self._p("w1")) + self._p("b1"))
        return G.matmul(h, self._p("w2")) + self._p("b2")

    def __call__(self, x) -> G.Node:
        return G.sigmoid(self.logits(x))


class AdversarialLoss(NamedTuple):
    value: G.Node
    terms: int
    empty: bool


def _stack(centers: Sequence[G.Node]) -> G.Node:
    return G.concat([G.reshape(c, (1, c.shape[-1])) for c in centers], axis=0)


def domain_adversarial_loss(src: ClassCenters, tgt: ClassCenters, disc: DomainDiscriminator,
                            use_grl: bool = True) -> AdversarialLoss:
    """Summed BCE of the discriminator on every present center (0 = source, 1 = target)."""
    rows, labels = [], []
    for cc in (src, tgt):
        for k in cc.categories():
            rows.append(cc.centers[k])
            labels.append(float(cc.domain.label))
    if not rows:
        return AdversarialLoss(G.Node(0.0), 0, True)
    x = _stack(rows)
    if use_grl:
        x = G.grl(x)
    z = disc.logits(x)
    d = np.array(labels).reshape(-1, 1)
    # BCE(sigmoid(z), d) == softplus(z) - d * z
    loss = G.sum_(G.softplus(z) - z * d)
    return AdversarialLoss(loss, len(rows), False)


@dataclass(frozen=True)
class GlobalClassMemory:
    prototypes: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int, dim: int) -> "GlobalClassMemory":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def has(self, k: int) -> bool:
        return self.counts[k] > 0

    def defined(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.counts > 0)]


def memory_update(mem: GlobalClassMemory, centers: ClassCenters) -> GlobalClassMemory:
    protos = mem.prototypes.copy()
    counts = mem.counts.copy()
    for k in centers.categories():
        n = centers.counts[k]
        c = centers.centers[k].value
        if counts[k] == 0:
            protos[k] = c
        else:
            w = n / (n + counts[k])
            protos[k] = (1.0 - w) * protos[k] + w * c
        counts[k] += n
    return GlobalClassMemory(protos, counts)


class ContrastiveLoss(NamedTuple):
    value: G.Node
    terms: int
    skipped: tuple[tuple[str, int], ...]


def contrastive_loss(centers: ClassCenters | Sequence[ClassCenters], mem: GlobalClassMemory,
                     tau: float = 0.07) -> ContrastiveLoss:
    """Cross-entropy of each batch center against its own global prototype.

    Logits are cosine similarities to every defined prototype divided by
    ``tau``. Centers whose category has no prototype yet are skipped.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    groups = [centers] if isinstance(centers, ClassCenters) else list(centers)
    defined = mem.defined()
    col = {k: i for i, k in enumerate(defined)}
    protos = mem.prototypes[defined] if defined else None
    total, terms, skipped = None, 0, []
    for cc in groups:
        rows, cols = [], []
        for k in cc.categories():
            c = cc.centers[k]
            if k not in col or np.linalg.norm(c.value) == 0:
                skipped.append((cc.domain.value, k))
                continue
            rows.append(c)
            cols.append(col[k])
        if not rows:
            continue
        sims = G.cosine_similarity(_stack(rows), protos)
        logp = G.log_softmax(sims * (1.0 / tau))
        onehot = np.zeros((len(rows), len(defined)))
        onehot[np.arange(len(rows)), cols] = 1.0
        term = -G.sum_(logp * onehot)
        total = term if total is None else total + term
        terms += len(rows)
    if total is None:
        total = G.Node(0.0)
    return ContrastiveLoss(total, terms, tuple(skipped))
