"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that produces a tensor from tape-participating inputs
records a backward closure; calling ``backward()`` on a scalar result
accumulates gradients into every reachable tensor whose ``requires_grad``
is set. ``detach()`` is the stop-gradient marker: the returned tensor
shares data but severs the tape, so no gradient ever crosses it.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError


class Tensor:
    """N-dimensional float64 array participating in the gradient tape.

    Data is contiguous and row-major. Values are validated to be finite
    at construction, so a NaN/Inf produced anywhere surfaces immediately
    at the op that created it rather than at the end of the network.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward_fn=None, _op: str = "leaf"):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values produced by op '{_op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._op = _op
        self._backward_done = False

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={list(self.data.shape)}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- tape control ------------------------------------------------------

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no tape edge, never requires grad."""
        return Tensor(self.data, requires_grad=False, _op="detach")

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode accumulation from this scalar over the whole tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        if self._backward_done:
            raise RuntimeError("backward() called twice on the same loss without reset")
        self._backward_done = True

        # Iterative topo sort: graphs can be deep relative to the recursion limit.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- elementwise arithmetic (broadcasting) ------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward_fn=bw, _op="add")

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data
        out_data = a * b

        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(_unbroadcast(g * b, a.shape))
            if other.requires_grad:
                other.accumulate_grad(_unbroadcast(g * a, b.shape))

        return Tensor(out_data, _parents=(self, other), _backward_fn=bw, _op="mul")

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(-g)

        return Tensor(-self.data, _parents=(self,), _backward_fn=bw, _op="neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) + (-self)

    def sum(self) -> "Tensor":
        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(np.full_like(self.data, float(g.reshape(()))))

        return Tensor(self.data.sum(), _parents=(self,), _backward_fn=bw, _op="sum")

    # -- structural ops ------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        out_data = self.data.reshape(shape)

        def bw(g):
            if self.requires_grad:
                self.accumulate_grad(g.reshape(orig))

        return Tensor(out_data, _parents=(self,), _backward_fn=bw, _op="reshape")

    def __getitem__(self, idx) -> "Tensor":
        """Basic slicing with gradient scatter back into the slice."""
        out_data = self.data[idx]

        def bw(g):
            if self.requires_grad:
                buf = np.zeros_like(self.data)
                buf[idx] += g
                self.accumulate_grad(buf)

        return Tensor(out_data, _parents=(self,), _backward_fn=bw, _op="slice")


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def stop_gradient(t: Tensor) -> Tensor:
    """Functional alias for ``Tensor.detach()``."""
    return t.detach()


def as_tensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    return _as_tensor(x)
