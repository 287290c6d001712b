"""The finite-difference gradient suite run by ``weatherda gradcheck``.

Each check draws random inputs, wraps the graph under test into a scalar
and compares reverse-mode gradients with central differences. Primitives
must agree to SMOOTH_TOL; compositions that involve normalisation,
matching or clipping get COMPOSED_TOL.

Gradient reversal is invisible to finite differences (the forward pass is
the identity), so checks through it difference a mirror function: the
same graph without the reversal and with the reversed branch negated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import grad as G
from .core import Box3D, DomainTag, QueryBatch
from .grad.check import analytic_grad, numeric_grad
from .qddm import (
    DomainDiscriminator,
    GlobalClassMemory,
    class_centers,
    contrastive_loss,
    domain_adversarial_loss,
)
from .selftrain.detector import BOX_DIM, params_to_box
from .selftrain.losses import detection_loss

SMOOTH_TOL = 1e-6
COMPOSED_TOL = 1e-4
STEP = 1e-5

# returns (f, x) or (f, x, mirror) where mirror is differenced in place of f
Builder = Callable[[np.random.Generator, int], tuple]


@dataclass(frozen=True)
class Check:
    name: str
    tolerance: float
    build: Builder


@dataclass
class CheckResult:
    name: str
    tolerance: float
    max_error: float
    instances: int
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error <= self.tolerance


def _away_from_zero(rng, shape, low=0.2, high=2.0):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(low, high, shape)


def _shape(rng):
    return (int(rng.integers(1, 5)), int(rng.integers(1, 5)))


def _weighted(out_shape, rng):
    # a random linear read-out keeps every output coordinate in play
    w = rng.normal(size=out_shape)
    return lambda y: G.sum_(y * w)


def _unary(op, sample=lambda rng, s: rng.normal(size=s)):
    def build(rng, i):
        x = sample(rng, _shape(rng))
        read = _weighted(np.shape(op(G.Node(x)).value), rng)
        return (lambda n: read(op(n))), x
    return build


def _binary(op, sample_other=lambda rng, s: rng.normal(size=s), position_swaps=True):
    def build(rng, i):
        s = _shape(rng)
        x, other = rng.normal(size=s), sample_other(rng, s)
        left = (i % 2 == 0) or not position_swaps
        f = (lambda n: op(n, other)) if left else (lambda n: op(other, n))
        read = _weighted(s, rng)
        return (lambda n: read(f(n))), x
    return build


def _div(rng, i):
    s = _shape(rng)
    if i % 2 == 0:
        other = _away_from_zero(rng, s, 0.5, 2.0)
        x = rng.normal(size=s)
        f = lambda n: G.div(n, other)
    else:
        other = rng.normal(size=s)
        x = _away_from_zero(rng, s, 0.5, 2.0)
        f = lambda n: G.div(other, n)
    read = _weighted(s, rng)
    return (lambda n: read(f(n))), x


def _matmul(rng, i):
    n, k, m = (int(v) for v in rng.integers(1, 5, 3))
    if i % 2 == 0:
        x, other = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        f = lambda a: G.matmul(a, other)
    else:
        x, other = rng.normal(size=(k, m)), rng.normal(size=(n, k))
        f = lambda a: G.matmul(other, a)
    read = _weighted((n, m), rng)
    return (lambda a: read(f(a))), x


def _row_broadcast_add(rng, i):
    n, d = _shape(rng)
    x, rows = rng.normal(size=(1, d)), rng.normal(size=(n, d))
    read = _weighted((n, d), rng)
    return (lambda a: read(G.add(rows, a))), x


def _gather(rng, i):
    s = _shape(rng)
    idx = rng.integers(0, s[0], int(rng.integers(1, 6)))
    x = rng.normal(size=s)
    read = _weighted((idx.size, s[1]), rng)
    return (lambda a: read(G.gather_rows(a, idx))), x


def _concat(rng, i):
    n, d = _shape(rng)
    other = rng.normal(size=(int(rng.integers(1, 4)), d))
    x = rng.normal(size=(n, d))
    read = _weighted((n + other.shape[0], d), rng)
    return (lambda a: read(G.concat([other, a], axis=0))), x


def _sum_axis(rng, i):
    s = _shape(rng)
    axis = (None, 0, 1)[i % 3]
    x = rng.normal(size=s)
    out = np.sum(x, axis=axis)
    read = _weighted(np.shape(out), rng)
    return (lambda a: read(G.sum_(a, axis=axis))), x


def _reshape(rng, i):
    n, d = _shape(rng)
    x = rng.normal(size=(n, d))
    read = _weighted((d, n), rng)
    return (lambda a: read(G.reshape(a, (d, n)))), x


def _power(rng, i):
    s = _shape(rng)
    p = float(rng.choice([2.0, 3.0, 0.5, -1.0]))
    x = rng.uniform(0.5, 2.0, s)
    read = _weighted(s, rng)
    return (lambda a: read(G.power(a, p))), x


def _cosine(rng, i):
    n, d = (int(v) for v in rng.integers(1, 5, 2))
    d += 1
    other = rng.normal(size=(int(rng.integers(1, 5)), d))
    x = rng.normal(size=(n, d))
    read = _weighted((n, other.shape[0]), rng)
    return (lambda a: read(G.cosine_similarity(a, other))), x


def _grl(rng, i):
    s = _shape(rng)
    x = rng.normal(size=s)
    read = _weighted(s, rng)
    return (lambda a: read(G.grl(a))), x, (lambda a: -read(a))


def _grl_composition(rng, i):
    """An MLP with the reversal in the middle of the graph."""
    d, h = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    w1, w2 = rng.normal(size=(d, h)), rng.normal(size=(h, 1))
    x = rng.normal(size=(int(rng.integers(1, 5)), d))

    def f(a, reverse=True):
        u = G.softplus(G.matmul(a, w1))
        u = G.grl(u) if reverse else u
        return G.sum_(G.sigmoid(G.matmul(u, w2)))
    return f, x, (lambda a: -f(a, reverse=False))


def _mlp_bce(rng, i):
    d = int(rng.integers(2, 8))
    disc = DomainDiscriminator.init(d, 16, rng)
    x = rng.normal(size=(int(rng.integers(2, 6)), d))
    labels = rng.integers(0, 2, (x.shape[0], 1)).astype(float)

    def f(a):
        z = disc.logits(a)
        return G.sum_(G.softplus(z) - z * labels)
    return f, x


def _queries(rng, features, logits, domain):
    boxes = tuple(Box3D(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0) for _ in range(logits.shape[0]))
    return QueryBatch(features, logits, boxes, domain, background=True)


def _qddm_inputs(rng, num_classes=3, dim=6, n=10):
    # confident logits so every query clears gamma and lands in a known class
    cls = rng.integers(0, num_classes, n)
    logits = rng.normal(0.0, 0.3, (n, num_classes + 1))
    logits[np.arange(n), cls] += 4.0
    mem = GlobalClassMemory(rng.normal(size=(num_classes, dim)),
                            rng.integers(1, 50, num_classes).astype(np.int64))
    return logits, mem


def _contrastive(rng, i):
    dim = int(rng.integers(3, 8))
    logits, mem = _qddm_inputs(rng, dim=dim)
    x = rng.normal(size=(logits.shape[0], dim))

    def f(a):
        cc = class_centers(_queries(rng, a, logits, DomainTag.SOURCE), 0.5)
        return contrastive_loss(cc, mem, 0.07).value
    return f, x


def _qddm_objective(rng, i):
    """Weighted adversarial plus contrastive terms over source and target queries."""
    dim = int(rng.integers(3, 8))
    logits, mem = _qddm_inputs(rng, dim=dim, n=12)
    disc = DomainDiscriminator.init(dim, 16, rng)
    x = rng.normal(size=(logits.shape[0], dim))
    half = logits.shape[0] // 2
    src_rows, tgt_rows = np.arange(half), np.arange(half, logits.shape[0])

    def f(a, reverse=True):
        src = class_centers(_queries(rng, G.gather_rows(a, src_rows), logits[:half], DomainTag.SOURCE))
        tgt = class_centers(_queries(rng, G.gather_rows(a, tgt_rows), logits[half:], DomainTag.NIGHT))
        adv = domain_adversarial_loss(src, tgt, disc, use_grl=reverse).value
        con = contrastive_loss([src, tgt], mem, 0.07).value
        return (adv if reverse else -adv) * 0.1 + con * 0.1
    return f, x, (lambda a: f(a, reverse=False))


def _detection_loss(rng, i):
    k, q = 3, int(rng.integers(3, 7))
    n_obj = int(rng.integers(1, q))
    centers = rng.uniform(-8, 8, (q, 2))
    box = np.column_stack([
        centers + rng.normal(0, 0.3, (q, 2)), rng.uniform(0.5, 1.0, q),
        rng.uniform(1.0, 2.5, (q, 3)), np.zeros((q, 2))])
    yaw = rng.uniform(-np.pi, np.pi, q)
    box[:, 6], box[:, 7] = np.sin(yaw), np.cos(yaw)
    labels = []
    for j in rng.choice(q, n_obj, replace=False):
        c = centers[j] + rng.normal(0, 0.4, 2)
        labels.append((Box3D(c[0], c[1], 0.8, *rng.uniform(1.0, 2.5, 3),
                             rng.uniform(-np.pi, np.pi)), int(rng.integers(0, k))))
    x = np.column_stack([rng.normal(size=(q, k + 1)), box])
    pick_logits = np.eye(k + 1 + BOX_DIM)[:, : k + 1]
    pick_box = np.eye(k + 1 + BOX_DIM)[:, k + 1:]

    def f(a):
        logits, params = G.matmul(a, pick_logits), G.matmul(a, pick_box)
        boxes = tuple(params_to_box(r) for r in params.value)
        qb = QueryBatch(np.zeros((q, 1)), logits, boxes, DomainTag.SOURCE,
                        background=True, box_params=params)
        return detection_loss(qb, labels, 2.0)
    return f, x


PRIMITIVES = [
    Check("add", SMOOTH_TOL, _binary(G.add)),
    Check("add_row_broadcast", SMOOTH_TOL, _row_broadcast_add),
    Check("sub", SMOOTH_TOL, _binary(G.sub)),
    Check("mul", SMOOTH_TOL, _binary(G.mul)),
    Check("div", SMOOTH_TOL, _div),
    Check("matmul", SMOOTH_TOL, _matmul),
    Check("neg", SMOOTH_TOL, _unary(G.neg)),
    Check("power", SMOOTH_TOL, _power),
    Check("relu", SMOOTH_TOL, _unary(G.relu, _away_from_zero)),
    Check("exp", SMOOTH_TOL, _unary(G.exp)),
    Check("log", SMOOTH_TOL, _unary(G.log, lambda rng, s: rng.uniform(0.3, 3.0, s))),
    Check("abs", SMOOTH_TOL, _unary(G.abs_, _away_from_zero)),
    Check("sigmoid", SMOOTH_TOL, _unary(G.sigmoid)),
    Check("softplus", SMOOTH_TOL, _unary(G.softplus)),
    Check("sum", SMOOTH_TOL, _sum_axis),
    Check("transpose", SMOOTH_TOL, _unary(G.transpose)),
    Check("reshape", SMOOTH_TOL, _reshape),
    Check("gather_rows", SMOOTH_TOL, _gather),
    Check("concat", SMOOTH_TOL, _concat),
    Check("softmax", SMOOTH_TOL, _unary(G.softmax)),
    Check("log_softmax", SMOOTH_TOL, _unary(G.log_softmax)),
    Check("l2_normalize", SMOOTH_TOL, _unary(G.l2_normalize, lambda rng, s: rng.normal(size=(s[0], s[1] + 1)))),
    Check("cosine_similarity", SMOOTH_TOL, _cosine),
    Check("grl", SMOOTH_TOL, _grl),
]

COMPOSITIONS = [
    Check("grl_composition", COMPOSED_TOL, _grl_composition),
    Check("mlp_bce", COMPOSED_TOL, _mlp_bce),
    Check("contrastive_loss", COMPOSED_TOL, _contrastive),
    Check("qddm_objective", COMPOSED_TOL, _qddm_objective),
    Check("detection_loss", COMPOSED_TOL, _detection_loss),
]

ALL_CHECKS = PRIMITIVES + COMPOSITIONS


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    if g_ad.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def run_check(check: Check, instances: int = 50, seed: int = 42) -> CheckResult:
    rng = np.random.default_rng([seed, sum(map(ord, check.name))])
    worst = 0.0
    for i in range(instances):
        try:
            f, x, *mirror = check.build(rng, i)
            err = relative_error(analytic_grad(f, x), numeric_grad(mirror[0] if mirror else f, x, STEP))
        except Exception as exc:  # a crash counts as a failed check, not an aborted suite
            return CheckResult(check.name, check.tolerance, float("nan"), i, f"{type(exc).__name__}: {exc}")
        worst = max(worst, err) if np.isfinite(err) else float("inf")
    return CheckResult(check.name, check.tolerance, worst, instances)


def run_suite(instances: int = 50, seed: int = 42, checks=None) -> list[CheckResult]:
    return [run_check(c, instances, seed) for c in (checks or ALL_CHECKS)]


def format_report(results: list[CheckResult]) -> str:
    lines = [f"tolerances: smooth {SMOOTH_TOL:g}, composed {COMPOSED_TOL:g}; step {STEP:g}"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f" ({r.failure})" if r.failure else ""
        lines.append(f"{status} {r.name:<20} max_rel_err={r.max_error:.3e} tol={r.tolerance:g} "
                     f"n={r.instances}{detail}")
    failed = [r.name for r in results if not r.passed]
    lines.append("all checks passed" if not failed else "failed: " + ", ".join(failed))
    return "\n".join(lines)
