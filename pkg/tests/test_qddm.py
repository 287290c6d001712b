import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from weatherda import grad as G
from weatherda.core import Box3D, DomainTag, QueryBatch
from weatherda.qddm import (ClassCenters, DomainDiscriminator, GlobalClassMemory, class_centers,
                            contrastive_loss, domain_adversarial_loss, memory_update)

BOX = Box3D(0, 0, 0, 1, 1, 1)


def batch(features, classes, conf=0.9, num_classes=3, domain=DomainTag.SOURCE):
    """Queries whose foreground argmax is ``classes`` with probability ``conf``."""
    f = features if isinstance(features, G.Node) else np.asarray(features, dtype=float)
    n = f.shape[0]
    p = np.full((n, num_classes + 1), (1 - conf) / num_classes)
    p[np.arange(n), classes] = conf
    return QueryBatch(f, np.log(p), (BOX,) * n, domain)


def centers_from(domain, mapping, counts=None):
    cc = ClassCenters(domain)
    for k, v in mapping.items():
        cc.centers[k] = G.Node(np.asarray(v, dtype=float))
        cc.counts[k] = (counts or {}).get(k, 1)
    return cc


def test_class_centers_examples():
    cc = class_centers(batch([[1, 0], [0, 1]], [1, 1]), 0.5)
    assert np.allclose(cc.centers[1].value, [0.5, 0.5]) and cc.counts[1] == 2
    assert class_centers(batch([[1, 0]], [0], conf=0.4), 0.5).centers == {}
    cc = class_centers(batch([[3, 4]], [2]), 0.5)
    assert np.allclose(cc.centers[2].value, [0.6, 0.8])


def test_class_centers_skip_zero_norm():
    cc = class_centers(batch([[0, 0], [3, 4]], [0, 0]), 0.5)
    assert cc.n_zero_norm == 1 and cc.counts[0] == 1


@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_class_centers_permutation_and_duplication(seed, n):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(n, 4))
    cls = rng.integers(0, 3, n)
    conf = rng.uniform(0.4, 1.0, n)
    p = np.full((n, 4), 0.0)
    p[:, 3] = 1 - conf
    p[np.arange(n), cls] = conf
    base = class_centers(QueryBatch(f, np.log(p + 1e-300), (BOX,) * n, DomainTag.SOURCE), 0.5)
    perm = rng.permutation(n)
    pc = class_centers(QueryBatch(f[perm], np.log(p[perm] + 1e-300), (BOX,) * n, DomainTag.SOURCE), 0.5)
    dup = class_centers(QueryBatch(np.vstack([f, f]), np.log(np.vstack([p, p]) + 1e-300),
                                   (BOX,) * (2 * n), DomainTag.SOURCE), 0.5)
    assert base.categories() == pc.categories() == dup.categories()
    for k in base.categories():
        assert np.allclose(base.centers[k].value, pc.centers[k].value, atol=1e-12)
        assert np.allclose(base.centers[k].value, dup.centers[k].value, atol=1e-12)
        assert dup.counts[k] == 2 * base.counts[k]


def _disc_constant(logit: float, dim=2):
    d = DomainDiscriminator.init(dim, 4, np.random.default_rng(0))
    for k, v in d.params.items():
        v.value = np.zeros_like(v.value)
    d._p("b2").value = np.array([logit])
    return d


def test_adversarial_examples():
    src = centers_from(DomainTag.SOURCE, {0: [1.0, 0.0]})
    tgt = centers_from(DomainTag.NIGHT, {0: [0.0, 1.0]})
    half = domain_adversarial_loss(src, tgt, _disc_constant(0.0))
    assert half.value.value.item() == pytest.approx(2 * math.log(2))
    # a discriminator that outputs ~0 for the source center contributes ~0
    sure = domain_adversarial_loss(src, ClassCenters(DomainTag.NIGHT), _disc_constant(-40.0))
    assert sure.value.value.item() < 1e-15
    empty = domain_adversarial_loss(ClassCenters(DomainTag.SOURCE), ClassCenters(DomainTag.NIGHT),
                                    _disc_constant(0.0))
    assert empty.empty and empty.value.value.item() == 0.0


def test_adversarial_grl_flips_feature_gradient(rng):
    disc = DomainDiscriminator.init(4, 64, rng)
    grads = []
    for use_grl in (True, False):
        f = G.parameter(rng.normal(size=(6, 4)) if not grads else base.copy())
        if not grads:
            base = f.value.copy()
        src = class_centers(batch(f, [0, 1, 2, 0, 1, 2]), 0.5)
        src = ClassCenters(DomainTag.SOURCE, src.centers, src.counts)
        tgt = ClassCenters(DomainTag.NIGHT, {0: G.Node(np.ones(4) / 2)}, {0: 1})
        loss = domain_adversarial_loss(src, tgt, disc, use_grl=use_grl).value
        for p in disc.params.values():
            p.zero_grad()
        loss.backward()
        grads.append((f.grad.copy(), {k: v.grad.copy() for k, v in disc.params.items()}))
    assert np.allclose(grads[0][0], -grads[1][0], atol=1e-12)
    for k in grads[0][1]:
        assert np.allclose(grads[0][1][k], grads[1][1][k], atol=1e-12)


def test_memory_update_examples():
    mem = GlobalClassMemory.empty(2, 2)
    c = centers_from(DomainTag.SOURCE, {0: [0.2, 0.4]}, {0: 3})
    m1 = memory_update(mem, c)
    assert np.array_equal(m1.prototypes[0], [0.2, 0.4]) and m1.counts[0] == 3
    assert m1.counts[1] == 0 and np.array_equal(m1.prototypes[1], [0, 0])
    m2 = memory_update(m1, centers_from(DomainTag.SOURCE, {0: [1.0, 0.0]}, {0: 3}))
    assert np.allclose(m2.prototypes[0], [0.6, 0.2])
    assert mem.counts[0] == 0  # the input memory is not mutated


@given(st.integers(0, 2**32 - 1))
def test_memory_streaming_mean_and_hull(seed):
    rng = np.random.default_rng(seed)
    mem = GlobalClassMemory.empty(3, 4)
    seen = {k: [] for k in range(3)}
    for _ in range(30):
        present = [k for k in range(3) if rng.random() < 0.6]
        cc = centers_from(DomainTag.SOURCE, {k: rng.normal(size=4) for k in present},
                          {k: int(rng.integers(1, 20)) for k in present})
        mem = memory_update(mem, cc)
        for k in present:
            seen[k].append((cc.counts[k], cc.centers[k].value))
        for k, rows in seen.items():
            if rows:
                vals = np.array([v for _, v in rows])
                assert np.all(mem.prototypes[k] >= vals.min(axis=0) - 1e-12)
                assert np.all(mem.prototypes[k] <= vals.max(axis=0) + 1e-12)
                assert mem.counts[k] == sum(n for n, _ in rows)


def test_contrastive_examples():
    mem = GlobalClassMemory(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1, 1]))
    eq = centers_from(DomainTag.SOURCE, {0: [1.0, 1.0]})
    assert contrastive_loss(eq, mem, 0.07).value.value.item() == pytest.approx(math.log(2))
    mem2 = GlobalClassMemory(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1, 1]))
    sharp = centers_from(DomainTag.SOURCE, {0: [1.0, 0.0]})
    assert contrastive_loss(sharp, mem2, 1e-3).value.value.item() < 1e-12

    sims = np.array([0.9, 0.1, -0.2])
    protos = np.eye(3)
    # a unit center whose cosine with each axis prototype is ``sims``
    c = sims / np.linalg.norm(sims)
    mem3 = GlobalClassMemory(protos, np.array([1, 1, 1]))
    got = contrastive_loss(centers_from(DomainTag.SOURCE, {0: c}), mem3, 0.07).value.value.item()
    z = (sims / np.linalg.norm(sims)) / 0.07
    expected = -(z[0] - math.log(np.exp(z).sum()))
    assert got == pytest.approx(expected, rel=1e-12)


def test_contrastive_hand_oracle_exact_sims():
    # prototypes built so the cosines with a fixed center are exactly (0.9, 0.1, -0.2)
    sims = np.array([0.9, 0.1, -0.2])
    c = np.array([1.0, 0.0, 0.0])
    protos = np.array([[s, math.sqrt(1 - s * s), 0.0] for s in sims])
    mem = GlobalClassMemory(protos, np.array([1, 1, 1]))
    got = contrastive_loss(centers_from(DomainTag.SOURCE, {0: c}), mem, 0.07).value.value.item()
    z = sims / 0.07
    assert got == pytest.approx(-(z[0] - math.log(np.exp(z).sum())), rel=1e-12)


def test_contrastive_skips_unseen_and_rejects_tau():
    mem = GlobalClassMemory(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([1, 0]))
    res = contrastive_loss(centers_from(DomainTag.NIGHT, {0: [1, 0], 1: [0, 1]}), mem)
    assert res.skipped == (("night", 1),) and res.terms == 1
    with pytest.raises(ValueError):
        contrastive_loss(centers_from(DomainTag.NIGHT, {0: [1, 0]}), mem, 0.0)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_contrastive_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    mem = GlobalClassMemory(rng.normal(size=(3, 4)), np.array([2, 5, 1]))
    cs = {k: rng.normal(size=4) for k in range(3)}
    k = int(rng.integers(3))
    scaled = dict(cs)
    scaled[k] = lam * cs[k]
    a = contrastive_loss(centers_from(DomainTag.SOURCE, cs), mem, 0.07).value.value.item()
    b = contrastive_loss(centers_from(DomainTag.SOURCE, scaled), mem, 0.07).value.value.item()
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_full_objective_gradient_wrt_features(rng):
    disc = DomainDiscriminator.init(5, 64, rng)
    mem = GlobalClassMemory(rng.normal(size=(3, 5)), np.array([3, 3, 3]))
    cls_s, cls_t = rng.integers(0, 3, 8), rng.integers(0, 3, 8)
    f0 = rng.normal(size=(16, 5))

    def objective(f, reverse=True):
        src = class_centers(batch(G.gather_rows(f, np.arange(8)), cls_s), 0.5)
        tgt = class_centers(batch(G.gather_rows(f, np.arange(8, 16)), cls_t, domain=DomainTag.RAIN), 0.5)
        adv = domain_adversarial_loss(src, tgt, disc).value
        con = contrastive_loss([src, tgt], mem, 0.07).value
        # the reversal layer is the identity going forward, so finite differences
        # see the adversarial term with its sign flipped
        return adv * (0.1 if reverse else -0.1) + con * 0.1

    g_ad = G.analytic_grad(objective, f0)
    g_fd = G.numeric_grad(lambda f: objective(f, reverse=False), f0)
    assert np.max(np.abs(g_ad - g_fd) / np.maximum(1, np.maximum(abs(g_ad), abs(g_fd)))) < 1e-4
