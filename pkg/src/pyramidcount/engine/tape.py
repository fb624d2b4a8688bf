from __future__ import annotations

import numpy as np


class Var:
    """An array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


class GradTape:
    """Ordered record of forward ops; backward replays them in reverse."""

    def __init__(self):
        self.ops = []

    def record(self, name, backward_fn):
        self.ops.append((name, backward_fn))

    def backward(self, output, grad=None):
        if grad is None:
            grad = np.ones_like(output.data)
        output.grad = np.asarray(grad, dtype=output.data.dtype)
        visited = []
        for name, fn in reversed(self.ops):
            fn()
            visited.append(name)
        return visited

    def __len__(self):
        return len(self.ops)
