"""Minimal reverse-mode differentiation engine.

Just enough machinery for the calibration network: a ``Var`` wraps a
float64 ndarray, records its parents and a vector-Jacobian-product
closure, and ``backward`` walks the graph once in reverse topological
order accumulating gradients. Only the primitives the network needs are
provided (3x3 conv, relu, add, global average pool, affine head, MSE).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ._kernels.conv_kernels import conv3x3, conv3x3_backward


class Var:
    """Node in the computation graph: value, accumulated gradient, and
    the VJP closures pointing at its parents."""

    __slots__ = ("value", "grad", "parents", "vjps", "requires_grad")

    def __init__(
        self,
        value: np.ndarray | float,
        parents: Sequence["Var"] = (),
        vjps: Sequence[Callable[[np.ndarray], np.ndarray]] = (),
        requires_grad: bool = True,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape


def constant(value) -> Var:
    return Var(value, requires_grad=False)


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order  # children after their parents


def backward(root: Var) -> None:
    """Populate ``grad`` on every reachable Var that requires gradients.

    The root must be scalar; its seed gradient is 1.
    """
    if root.value.ndim != 0:
        raise ValueError("backward expects a scalar root (the loss)")
    order = _toposort(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            g = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# Primitives.


def conv3x3_op(x: Var, w: Var, b: Var) -> Var:
    xv, wv, bv = x.value, w.value, b.value
    y = conv3x3(xv, wv, bv)
    cache: dict = {}

    def grads(gy):
        # the three vjps receive the same upstream gradient within one
        # backward pass; compute the conv backward once and share it
        if cache.get("key") is not gy:
            cache["key"] = gy
            cache["g"] = conv3x3_backward(xv, wv, np.asarray(gy))
        return cache["g"]

    return Var(
        y,
        parents=(x, w, b),
        vjps=(
            lambda gy: grads(gy)[0],
            lambda gy: grads(gy)[1],
            lambda gy: grads(gy)[2],
        ),
    )


def relu(x: Var) -> Var:
    mask = x.value > 0
    return Var(x.value * mask, parents=(x,), vjps=(lambda gy: gy * mask,))


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Var(a.value + b.value, parents=(a, b), vjps=(lambda gy: gy, lambda gy: gy))


def global_avg_pool(x: Var) -> Var:
    """(N, C, H, W) -> (N, C) mean over the spatial axes."""
    n, c, h, w = x.value.shape
    y = x.value.mean(axis=(2, 3))

    def vjp(gy):
        return np.broadcast_to(gy[:, :, None, None] / (h * w), x.value.shape)

    return Var(y, parents=(x,), vjps=(vjp,))


def affine(x: Var, w: Var, b: Var) -> Var:
    """(N, C) @ (C,) + scalar -> (N,)."""
    y = x.value @ w.value + b.value

    return Var(
        y,
        parents=(x, w, b),
        vjps=(
            lambda gy: np.outer(gy, w.value),
            lambda gy: x.value.T @ gy,
            lambda gy: np.asarray(gy.sum()),
        ),
    )


def mse(pred: Var, target: np.ndarray) -> Var:
    t = np.asarray(target, dtype=np.float64)
    r = pred.value - t
    n = r.size
    return Var(
        np.asarray(np.mean(r * r)),
        parents=(pred,),
        vjps=(lambda gy: (2.0 / n) * r * gy,),
    )
