"""Reverse-mode automatic differentiation on numpy arrays.

Every operation returns a new `Tensor` that remembers its inputs together
with one vector-Jacobian callback per input. The linked tensors form the
recorded forward graph (the gradient tape); `backward` replays it once in
reverse topological order, accumulating gradients with the chain rule.
"""

from __future__ import annotations

import numpy as np

#: When True, every tensor creation asserts all-finite values. Slow; meant
#: for tests and debugging.
FINITE_CHECKS = False


class Tensor:
    """A node of the recorded computation graph.

    ``data`` is the forward value. ``parents`` is a tuple of
    ``(input_tensor, vjp)`` pairs where ``vjp(grad_out)`` maps the gradient
    at this node to the gradient contribution for that input. Leaf tensors
    (inputs, parameters) have no parents; parameters carry a ``name``.

    ``requires_grad`` marks leaves whose gradient is wanted (parameters, or
    inputs under a gradient check). Operations drop graph edges to subtrees
    without it, so the backward pass never touches them.
    """

    __slots__ = ("data", "parents", "name", "requires_grad")

    def __init__(self, data, parents=(), name=None, requires_grad=False):
        self.data = np.asarray(data)
        self.parents = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        self.name = name
        self.requires_grad = bool(requires_grad) or bool(self.parents)
        if FINITE_CHECKS and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(
                f"non-finite values in tensor {name or '<anonymous>'}"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap an array-like as a leaf tensor (no-op for tensors when dtype matches)."""
    if isinstance(value, Tensor):
        if dtype is None or value.data.dtype == np.dtype(dtype):
            return value
        return Tensor(
            value.data.astype(dtype), value.parents, value.name,
            requires_grad=value.requires_grad,
        )
    return Tensor(np.asarray(value, dtype=dtype))


def _topological_order(root: Tensor) -> list[Tensor]:
    """Parents-first order of the graph below ``root`` (iterative DFS)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward_map(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss for every tensor in its graph, keyed by id."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(_topological_order(loss)):
        grad_out = grads.get(id(node))
        if grad_out is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(grad_out)
            if FINITE_CHECKS and not np.all(np.isfinite(contribution)):
                raise FloatingPointError("non-finite gradient during backward pass")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution
    return grads


def grad(loss: Tensor, *wrt: Tensor):
    """Gradient arrays of a scalar loss with respect to the given tensors.

    Raises
    ------
    ValueError
        If a requested tensor is not part of the recorded graph.
    """
    grads = backward_map(loss)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            raise ValueError(
                f"tensor {t.name or '<anonymous>'} is detached from the loss graph"
            )
        out.append(g)
    return out[0] if len(out) == 1 else tuple(out)
