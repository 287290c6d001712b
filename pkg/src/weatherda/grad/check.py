"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .engine import Node, no_grad


def numeric_grad(f: Callable[[Node], Node], x, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    with no_grad():
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += step
            xm[idx] -= step
            fp, fm = f(Node(xp)).value, f(Node(xm)).value
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                raise FloatingPointError(f"non-finite value at coordinate {idx}")
            g[idx] = (float(np.sum(fp)) - float(np.sum(fm))) / (2.0 * step)
    return g


def analytic_grad(f: Callable[[Node], Node], x) -> np.ndarray:
    node = Node(np.array(x, dtype=np.float64), requires_grad=True)
    out = f(node)
    if out.value.size != 1:
        raise ValueError("f must return a single-element node")
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("non-finite forward value")
    out.backward()
    g = np.zeros_like(node.value) if node.grad is None else node.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g


def grad_check(f: Callable[[Node], Node], x, step: float = 1e-5) -> float:
    """Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)."""
    g_ad = analytic_grad(f, x)
    g_fd = numeric_grad(f, x, step)
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if g_ad.size else 0.0
