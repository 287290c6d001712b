"""A small reverse-mode autodiff engine over dense numpy arrays of rank <= 2.

Each primitive is an :class:`Op` subclass with a ``forward`` computing the
value and a ``backward`` returning one adjoint per input. Calling
:meth:`Node.backward` walks the recorded graph once; the graph is consumed
afterwards and a second backward over it raises.
"""

from __future__ import annotations

import contextlib
from types import SimpleNamespace
from typing import Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class GraphConsumedError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "op", "ctx", "requires_grad", "consumed", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        v = np.array(value, dtype=np.float64)
        if v.ndim > 2:
            raise ValueError(f"rank {v.ndim} tensors are not supported")
        self.value = v
        self.grad = None
        self.parents: tuple[Node, ...] = ()
        self.op = None
        self.ctx = None
        self.requires_grad = requires_grad
        self.consumed = False
        self.name = name

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def detach(self) -> "Node":
        return Node(self.value)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.op.name if self.op else ("param" if self.requires_grad else "const")
        return f"Node({tag}, shape={self.shape})"

    # -- operators ----------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- reverse pass -------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a single-element output")
            grad = np.ones_like(self.value)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ValueError(f"seed shape {grad.shape} != output shape {self.shape}")
        order = _toposort(self)
        for n in order:
            if n.consumed:
                raise GraphConsumedError("graph already consumed by an earlier backward; "
                                         "re-run the forward pass")
        self.grad = grad if self.grad is None else self.grad + grad
        for n in reversed(order):
            if n.is_leaf or n.grad is None:
                continue
            pgrads = n.op.backward(n.ctx, n.grad)
            for p, g in zip(n.parents, pgrads):
                if g is None or not p.requires_grad:
                    continue
                if g.shape != p.shape:
                    raise AssertionError(f"{n.op.name}: adjoint shape {g.shape} != {p.shape}")
                p.grad = g if p.grad is None else p.grad + g
        for n in order:
            if not n.is_leaf:
                n.consumed = True
                n.ctx = None


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


class Op:
    name = "op"

    @staticmethod
    def forward(ctx, *values, **kw) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx, g) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kw) -> Node:
        nodes = tuple(as_node(x) for x in inputs)
        ctx = SimpleNamespace()
        out = Node(cls.forward(ctx, *(n.value for n in nodes), **kw))
        if _grad_enabled and any(n.requires_grad for n in nodes):
            out.parents = nodes
            out.op = cls
            out.ctx = ctx
            out.requires_grad = True
        return out


# -- broadcasting -----------------------------------------------------------

def _check_broadcast(name, a: np.ndarray, b: np.ndarray):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(big) == 2 and (small in ((big[1],), (1, big[1]), (big[0], 1))):
        return
    raise ValueError(f"{name}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary -----------------------------------------------------

class Add(Op):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("add", a, b)
        ctx.sa, ctx.sb = a.shape, b.shape
        return a + b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(g, ctx.sb)


class Sub(Op):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("sub", a, b)
        ctx.sa, ctx.sb = a.shape, b.shape
        return a - b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g, ctx.sa), _unbroadcast(-g, ctx.sb)


class Mul(Op):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("mul", a, b)
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g * ctx.b, ctx.a.shape), _unbroadcast(g * ctx.a, ctx.b.shape)


class Div(Op):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast("div", a, b)
        ctx.a, ctx.b = a, b
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        ctx.a, ctx.b = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        a2 = a if a.ndim == 2 else a[None, :]
        b2 = b if b.ndim == 2 else b[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        ga = (g2 @ b2.T).reshape(a.shape)
        gb = (a2.T @ g2).reshape(b.shape)
        return ga, gb


# -- elementwise unary ------------------------------------------------------

class Neg(Op):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (-g,)


class Power(Op):
    name = "power"

    @staticmethod
    def forward(ctx, a, p: float):
        ctx.a, ctx.p = a, float(p)
        return a ** ctx.p

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.p * ctx.a ** (ctx.p - 1.0),)


class Relu(Op):
    name = "relu"

    @staticmethod
    def forward(ctx, a):
        ctx.mask = a > 0
        return np.where(ctx.mask, a, 0.0)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


class Exp(Op):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        ctx.out = np.exp(a)
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out,)


class Log(Op):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        ctx.a = a
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.a,)


class Abs(Op):
    name = "abs"

    @staticmethod
    def forward(ctx, a):
        ctx.sign = np.sign(a)
        return np.abs(a)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.sign,)


class Sigmoid(Op):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        ctx.out = out
        return out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out * (1.0 - ctx.out),)


class Softplus(Op):
    """log(1 + exp(a)), evaluated without overflow."""

    name = "softplus"

    @staticmethod
    def forward(ctx, a):
        ctx.a = a
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    @staticmethod
    def backward(ctx, g):
        a = ctx.a
        e = np.exp(-np.abs(a))
        sig = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)


# -- reductions and reshaping -------------------------------------------------

class Sum(Op):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.shape, ctx.axis, ctx.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


class Transpose(Op):
    name = "transpose"

    @staticmethod
    def forward(ctx, a):
        return a.T.copy()

    @staticmethod
    def backward(ctx, g):
        return (g.T.copy(),)


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape=()):
        ctx.shape = a.shape
        return a.reshape(shape).copy()

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class GatherRows(Op):
    name = "gather_rows"

    @staticmethod
    def forward(ctx, a, index=()):
        idx = np.asarray(index, dtype=np.int64)
        ctx.shape, ctx.idx = a.shape, idx
        return a[idx].copy()

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape)
        np.add.at(out, ctx.idx, g)
        return (out,)


class Concat(Op):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.sizes = [a.shape[axis] for a in arrays]
        ctx.axis = axis
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        cuts = np.cumsum(ctx.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=ctx.axis))


# -- row-wise normalisations ------------------------------------------------

class Softmax(Op):
    name = "softmax"

    @staticmethod
    def forward(ctx, a):
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        ctx.out = e / e.sum(axis=-1, keepdims=True)
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        s = ctx.out
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


class LogSoftmax(Op):
    name = "log_softmax"

    @staticmethod
    def forward(ctx, a):
        z = a - a.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        ctx.soft = np.exp(out)
        return out

    @staticmethod
    def backward(ctx, g):
        return (g - ctx.soft * g.sum(axis=-1, keepdims=True),)


class L2Normalize(Op):
    name = "l2_normalize"

    @staticmethod
    def forward(ctx, a):
        norm = np.linalg.norm(a, axis=-1, keepdims=True)
        if np.any(norm == 0):
            raise ValueError("l2_normalize: zero-norm row")
        ctx.norm = norm
        ctx.out = a / norm
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        u = ctx.out
        return ((g - u * (g * u).sum(axis=-1, keepdims=True)) / ctx.norm,)


class CosineSimilarity(Op):
    """Pairwise cosine similarity: (N, D) x (M, D) -> (N, M); vectors give a scalar."""

    name = "cosine_similarity"

    @staticmethod
    def forward(ctx, a, b):
        if a.shape[-1] != b.shape[-1]:
            raise ValueError(f"cosine_similarity: feature sizes {a.shape} vs {b.shape}")
        na = np.linalg.norm(a, axis=-1, keepdims=True)
        nb = np.linalg.norm(b, axis=-1, keepdims=True)
        if np.any(na == 0) or np.any(nb == 0):
            raise ValueError("cosine_similarity: zero-norm input")
        ua, ub = a / na, b / nb
        ctx.ua, ctx.ub, ctx.na, ctx.nb = ua, ub, na, nb
        ctx.shapes = (a.shape, b.shape)
        return ua @ ub.T if ua.ndim == 2 or ub.ndim == 2 else np.array(ua @ ub)

    @staticmethod
    def backward(ctx, g):
        ua = np.atleast_2d(ctx.ua)
        ub = np.atleast_2d(ctx.ub)
        na = np.atleast_2d(ctx.na)
        nb = np.atleast_2d(ctx.nb)
        g2 = np.asarray(g).reshape(ua.shape[0], ub.shape[0])
        sim = ua @ ub.T
        ga = (g2 @ ub - (g2 * sim).sum(axis=1, keepdims=True) * ua) / na
        gb = (g2.T @ ua - (g2 * sim).sum(axis=0)[:, None] * ub) / nb
        return ga.reshape(ctx.shapes[0]), gb.reshape(ctx.shapes[1])


class GradReverse(Op):
    """Identity forward; the backward pass negates the incoming adjoint."""

    name = "grl"

    @staticmethod
    def forward(ctx, a):
        return a.copy()

    @staticmethod
    def backward(ctx, g):
        return (-g,)


# -- functional API ---------------------------------------------------------

def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def matmul(a, b):
    return MatMul.apply(a, b)


def neg(a):
    return Neg.apply(a)


def power(a, p: float):
    return Power.apply(a, p=p)


def relu(a):
    return Relu.apply(a)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def abs_(a):
    return Abs.apply(a)


def sigmoid(a):
    return Sigmoid.apply(a)


def softplus(a):
    return Softplus.apply(a)


def sum_(a, axis=None, keepdims=False):
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(a):
    return Transpose.apply(a)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def gather_rows(a, index: Sequence[int]):
    return GatherRows.apply(a, index=index)


def concat(nodes: Sequence, axis: int = 0):
    return Concat.apply(*nodes, axis=axis)


def softmax(a):
    return Softmax.apply(a)


def log_softmax(a):
    return LogSoftmax.apply(a)


def l2_normalize(a):
    return L2Normalize.apply(a)


def cosine_similarity(a, b):
    return CosineSimilarity.apply(a, b)


def grl(a):
    return GradReverse.apply(a)


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)
