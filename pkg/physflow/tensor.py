# This file is part of physflow. It is subject to the license terms in the
# LICENSE file found in the top-level directory of this distribution and at
# https://opensource.org/licenses/BSD-2-Clause. physflow may be copied, modified,
# propagated, or distributed according to the terms contained in the LICENSE
# file.

"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Graph` records every operation performed while it is active. Leaves
are tensors created with ``requires_grad=True``; operations on them produce
nodes that remember how to push gradients back to their parents.

.. code-block:: python

    from physflow import Graph, Tensor, matmul

    w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    x = Tensor([[1.0], [1.0]])
    with Graph() as graph:
        loss = matmul(w, x).sum()
    graph.backward(loss)
    w.grad  # [[1, 1], [1, 1]]

Outside a graph, operations compute values only, which is what sampling uses.
"""

import itertools
import math
import threading
from collections.abc import Sequence
from typing import Callable, Optional, Union

import numpy as np

from physflow.exceptions import (
    NonDeterministicFunction,
    NonFiniteValue,
    NonScalarLoss,
    RejectedInput,
    ShapeMismatch,
)

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "grad_check",
    "matmul",
    "softmax_rows",
    "layer_norm",
    "silu",
    "gelu",
    "take",
    "concat",
    "transpose",
    "reshape",
]

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_node_ids = itertools.count()
_local = threading.local()


def _active_graph() -> Optional["Graph"]:
    stack = getattr(_local, "stack", None)
    if not stack:
        return None
    return stack[-1]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that may take part in a :class:`Graph`.

    ``data`` is a numpy array whose size is the product of ``shape``; ``grad``
    is filled by :meth:`Graph.backward` with an array of the same shape.
    """

    __slots__ = (
        "data",
        "grad",
        "requires_grad",
        "node_id",
        "name",
        "_parents",
        "_backward",
    )

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    # arithmetic -----------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return _add(self, _lift(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return _add(_lift(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return _sub(self, _lift(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return _sub(_lift(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return _mul(self, _lift(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return _mul(_lift(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return _div(self, _lift(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return _div(_lift(other), self)

    def __neg__(self) -> "Tensor":
        return _mul(self, Tensor(-1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, _lift(other))

    def __getitem__(self, key) -> "Tensor":
        return _getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else _axis_size(self.shape, axis)
        return _sum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _axis_size(shape: tuple, axis) -> int:
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))


def _result(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap `data` as the output of `op`, recording it when a graph is active."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(op)
    out = Tensor(data)
    graph = _active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        graph._record(out)
    return out


class Graph:
    """Ordered tape of recorded operations.

    Nodes are appended in creation order, which is a topological order, so a
    reverse walk visits every node after all of its consumers. Use it as a
    context manager; operations performed inside the ``with`` block are
    recorded.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}
        self.finalized = False

    def __enter__(self) -> "Graph":
        if self.finalized:
            raise RejectedInput("a finalized graph cannot record more operations")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()
        self.finalized = True

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, node: Tensor) -> None:
        if self.finalized:
            raise RejectedInput("a finalized graph cannot record more operations")
        for parent in node._parents:
            if parent.requires_grad and parent.is_leaf:
                self.leaves.setdefault(parent.node_id, parent)
        self.nodes.append(node)

    def backward(
        self, loss: Tensor, leaves: Optional[Sequence[Tensor]] = None
    ) -> dict[int, np.ndarray]:
        """Fill ``grad`` of every leaf with the derivative of `loss`.

        Leaves that the loss does not depend on get exactly-zero gradients;
        extra `leaves` not seen by the graph are zero-filled as well. Returns
        a map from leaf ``node_id`` to its gradient.
        """
        if loss.data.size != 1:
            raise NonScalarLoss(loss.shape)
        self.finalized = True
        targets = dict(self.leaves)
        for leaf in leaves or ():
            targets.setdefault(leaf.node_id, leaf)
        for node in self.nodes:
            node.grad = None
        for leaf in targets.values():
            leaf.grad = np.zeros_like(leaf.data)
        if not loss.requires_grad:
            return {key: leaf.grad for key, leaf in targets.items()}
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
        return {key: leaf.grad for key, leaf in targets.items()}


def backward(loss: Tensor, graph: Graph) -> dict[int, np.ndarray]:
    """Module-level alias of :meth:`Graph.backward`."""
    return graph.backward(loss)


# elementwise ---------------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    def _backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.shape))

    return _result("add", _broadcast("add", a, b, np.add), (a, b), _backward)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    def _backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-grad, b.shape))

    return _result("sub", _broadcast("sub", a, b, np.subtract), (a, b), _backward)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def _backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return _result("mul", _broadcast("mul", a, b, np.multiply), (a, b), _backward)


def _div(a: Tensor, b: Tensor) -> Tensor:
    def _backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        data = _broadcast("div", a, b, np.divide)
    return _result("div", data, (a, b), _backward)


def _broadcast(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None
    return fn(a.data, b.data)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def _backward(grad):
        x._accumulate(grad * sig * (1.0 + x.data * (1.0 - sig)))

    return _result("silu", x.data * sig, (x,), _backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    th = np.tanh(inner)

    def _backward(grad):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        local = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th**2) * dinner
        x._accumulate(grad * local)

    return _result("gelu", 0.5 * x.data * (1.0 + th), (x,), _backward)


# structural ----------------------------------------------------------------


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    def _backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        x._accumulate(np.broadcast_to(grad, x.shape))

    return _result("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), _backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, shape) from None

    def _backward(grad):
        x._accumulate(grad.reshape(x.shape))

    return _result("reshape", data, (x,), _backward)


def transpose(x: Tensor, axes: Optional[tuple] = None) -> Tensor:
    """Permute axes; with no `axes` swap the last two."""
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))

    def _backward(grad):
        x._accumulate(np.transpose(grad, inverse))

    return _result("transpose", np.transpose(x.data, axes), (x,), _backward)


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)


def _getitem(x: Tensor, key) -> Tensor:
    basic = _is_basic(key)

    def _backward(grad):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = grad
        else:
            np.add.at(full, key, grad)
        x._accumulate(full)

    return _result("getitem", np.array(x.data[key]), (x,), _backward)


def take(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-d `table`."""
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or (indices.size and (indices.min() < 0 or indices.max() >= table.shape[0])):
        raise ShapeMismatch("take", table.shape, indices.shape)

    def _backward(grad):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, grad)
        table._accumulate(full)

    return _result("take", table.data[indices], (table,), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", tensors[0].shape, tensors[-1].shape) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(grad):
        for tensor, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            if tensor.requires_grad:
                tensor._accumulate(np.take(grad, np.arange(start, stop), axis=axis))

    return _result("concat", data, tuple(tensors), _backward)


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching over leading axes.

    The reverse-mode rule is ``dA = dC·Bᵀ`` and ``dB = Aᵀ·dC``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None

    def _backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(grad, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), grad), b.shape))

    return _result("matmul", data, (a, b), _backward)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    if not np.all(np.isfinite(m.data)):
        raise NonFiniteValue("softmax_rows")
    shifted = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def _backward(grad):
        m._accumulate(s * (grad - (grad * s).sum(axis=-1, keepdims=True)))

    return _result("softmax_rows", s, (m,), _backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    if eps <= 0:
        raise RejectedInput("layer_norm eps must be positive")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeMismatch("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    lead = tuple(range(x.ndim - 1))

    def _backward(grad):
        if gain.requires_grad:
            gain._accumulate((grad * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias._accumulate(grad.sum(axis=lead))
        if x.requires_grad:
            gx = grad * gain.data
            x._accumulate(
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                )
            )

    return _result("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), _backward)


# gradient checking ---------------------------------------------------------


def _evaluate(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    out = f(*inputs)
    if out.data.size != 1:
        raise NonScalarLoss(out.shape)
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[ArrayLike],
    step: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of `f` against central differences.

    `f` is called as ``f(*inputs)`` and must return a scalar tensor. Tensor
    inputs are perturbed in place (and restored), so `f` may close over them
    instead of using its arguments. Returns the maximum over all input
    coordinates of ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise RejectedInput(f"grad_check step {step} outside [1e-7, 1e-3]")
    tensors = [x if isinstance(x, Tensor) else Tensor(np.array(x, dtype=np.float64)) for x in inputs]
    saved_flags = [t.requires_grad for t in tensors]
    for tensor in tensors:
        if not tensor.data.flags.c_contiguous or not tensor.data.flags.writeable:
            tensor.data = np.array(tensor.data, dtype=np.float64)
        tensor.requires_grad = True
    try:
        with Graph() as graph:
            loss = f(*tensors)
        graph.backward(loss, leaves=tensors)
        analytic = [t.grad.copy() for t in tensors]

        first = _evaluate(f, tensors)
        second = _evaluate(f, tensors)
        if first != second:
            raise NonDeterministicFunction(abs(first - second))

        worst = 0.0
        for tensor, grad in zip(tensors, analytic):
            flat = tensor.data.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = _evaluate(f, tensors)
                flat[i] = original - step
                minus = _evaluate(f, tensors)
                flat[i] = original
                numeric = (plus - minus) / (2.0 * step)
                error = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
                worst = max(worst, error)
        return worst
    finally:
        for tensor, flag in zip(tensors, saved_flags):
            tensor.requires_grad = flag
