import numpy as np
import pytest
from hypothesis import given, strategies as st

from weatherda import grad as G
from weatherda.grad import GraphConsumedError, Node, grad_check, load_checkpoint, save_checkpoint


def test_square_derivative():
    x = G.parameter(np.array(3.0))
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_l2_normalize_345():
    assert np.allclose(G.l2_normalize(Node([[3.0, 4.0]])).value, [[0.6, 0.8]])


def test_cosine_self_similarity(rng):
    v = rng.normal(size=(1, 5))
    a = Node(v)
    b = G.parameter(v.copy())
    s = G.cosine_similarity(a, b)
    assert s.value.item() == pytest.approx(1.0)
    s.backward()
    # the gradient at the duplicate is orthogonal to the input direction
    assert abs(float(b.grad.ravel() @ v.ravel())) < 1e-9

    def f(x):
        return G.sum_(G.cosine_similarity(Node(v), x))

    assert grad_check(f, v + 1e-3 * rng.normal(size=v.shape)) < 1e-6


def test_grl_forward_identity_backward_negation(rng):
    v = rng.normal(size=(3, 4))
    assert np.array_equal(G.grl(Node(v)).value, v)
    x = G.parameter(np.array(2.0))
    G.power(G.grl(x), 2).backward()
    assert x.grad == pytest.approx(-4.0)
    y = G.parameter(np.array(2.0))
    G.power(y, 2).backward()
    assert y.grad == pytest.approx(4.0)


def _random_graph(rng, x, reverse):
    w1 = rng.normal(size=(x.shape[1], 5))
    w2 = rng.normal(size=(5, 1))
    h = G.sigmoid(G.matmul(x, w1))
    out = G.sum_(G.softplus(G.matmul(h, w2)))
    return G.grl(out) if reverse else out


@given(st.integers(0, 2**32 - 1))
def test_grl_at_root_negates_gradient(seed):
    v = np.random.default_rng(seed).normal(size=(4, 3))
    grads = []
    for reverse in (False, True):
        x = G.parameter(v.copy())
        _random_graph(np.random.default_rng(seed), x, reverse).backward()
        grads.append(x.grad)
    assert np.allclose(grads[1], -grads[0], rtol=0, atol=1e-12)


def test_second_backward_rejected():
    x = G.parameter(np.array(2.0))
    y = x * x
    y.backward()
    with pytest.raises(GraphConsumedError):
        y.backward()


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        G.add(Node(np.ones((2, 3))), Node(np.ones((3, 2))))
    with pytest.raises(ValueError):
        G.matmul(Node(np.ones((2, 3))), Node(np.ones((2, 3))))
    with pytest.raises(ValueError):
        Node(np.ones((2, 2, 2)))


def test_no_grad_records_nothing():
    x = G.parameter(np.array(1.0))
    with G.no_grad():
        y = G.exp(x)
    assert not y.requires_grad and y.parents == ()


def test_grad_check_examples(rng):
    assert grad_check(lambda x: G.sum_(x * x), rng.normal(size=(3, 4))) <= 1e-8
    w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 1))

    def bce_mlp(x):
        z = G.matmul(G.relu(G.matmul(x, w1)), w2)
        return G.sum_(G.softplus(z) - z * 1.0)

    assert grad_check(bce_mlp, rng.normal(size=(5, 4)), step=1e-5) <= 1e-4


def test_grad_check_reports_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda x: G.sum_(G.log(x)), np.array([-1.0, 1.0]))


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4), "c": np.array(1.5)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, tensors, {"iteration": 3})
    back, meta = load_checkpoint(path)
    assert meta == {"iteration": 3}
    for k, v in tensors.items():
        assert np.array_equal(back[k], v) and back[k].shape == v.shape
    assert path.read_bytes()[:8] == b"WDACKPT1"
