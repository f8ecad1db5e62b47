"""Tensors with recorded parents and a replayable differentiation tape."""

from __future__ import annotations

import numpy as np


class Tensor:
    """A numpy array plus the graph edges needed for reverse-mode autodiff.

    Leaf tensors (parameters, inputs) have no parents. Operation results
    carry a backward_fn closure that routes an incoming gradient to the
    parents' grad buffers. Gradients accumulate across multiple uses.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, seed=None):
        """Populate .grad on every requires_grad leaf below this tensor."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            seed = np.ones_like(self.data)
        Tape(self).run(self, np.asarray(seed, dtype=self.data.dtype))

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a tensor, if it wants one."""
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    t.grad = g if t.grad is None else t.grad + g


def result(data, parents, backward_fn) -> Tensor:
    """Build an op output; it needs grad iff any parent does."""
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents, backward_fn=backward_fn if needs else None)


class Tape:
    """Topological record of the subgraph reaching a root tensor.

    Running the tape walks the record in reverse, so every node's
    consumers have already deposited their contributions before the
    node's own backward_fn fires.
    """

    def __init__(self, root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.order = order  # parents strictly before consumers

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        if seed.shape != root.data.shape:
            raise ValueError(f"seed shape {seed.shape} != root shape {root.data.shape}")
        root.grad = seed
        for node in reversed(self.order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
            if node.parents:
                node.grad = None if node is not root else node.grad
