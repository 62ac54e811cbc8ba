"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation records its parents and a gradient rule. The rules
are themselves written with :class:`Tensor` operations, so running
:func:`grad` with ``create_graph=True`` records the backward pass too and the
result can be differentiated again (used for exact second-order meta-gradients).
With ``create_graph=False`` the rules run with recording switched off.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[["Tensor"], Sequence["Tensor | None"]]


class Tensor:
    """An immutable float64 array that may take part in a recorded graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("non-finite value in tensor data")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    # construction -----------------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NumericError(f"non-finite value produced by {op}")
        out = cls.__new__(cls)
        data.setflags(write=False)
        out.data = data
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def leaf(self) -> "Tensor":
        """Fresh gradient-tracking leaf holding the same values."""
        return Tensor(self.data, requires_grad=True)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_axes(shape: tuple[int, ...], target: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    lead = len(shape) - len(target)
    if lead < 0:
        raise DimensionError(f"cannot reduce {shape} to {target}")
    axes = list(range(lead))
    for i, t in enumerate(target):
        s = shape[lead + i]
        if t == 1 and s != 1:
            axes.append(lead + i)
        elif t != s:
            raise DimensionError(f"cannot reduce {shape} to {target}")
    return tuple(axes), target


# shape plumbing -----------------------------------------------------------------

def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to a broadcast-compatible ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes, _ = _reduce_axes(x.shape, shape)
    data = x.data.sum(axis=axes).reshape(shape) if axes else x.data.reshape(shape)
    src = x.shape
    return Tensor._result(data, (x,), lambda g: (broadcast_to(g, src),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    src = x.shape
    return Tensor._result(data, (x,), lambda g: (sum_to(g, src),), "broadcast_to")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._result(data, (x,), lambda g: (reshape(g, src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,), lambda g: (transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError("swap_last needs at least 2 dimensions")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def index_select(x: Tensor, index) -> Tensor:
    """``x[index]`` for basic or integer-array indexing."""
    src = x.shape
    data = x.data[index]
    return Tensor._result(np.array(data), (x,), lambda g: (scatter_add(g, index, src),), "index")


def scatter_add(g: Tensor, index, shape: tuple[int, ...]) -> Tensor:
    """Zeros of ``shape`` with ``g`` accumulated at ``index`` (adjoint of indexing)."""
    out = np.zeros(shape)
    np.add.at(out, index, g.data)
    return Tensor._result(out, (g,), lambda gg: (index_select(gg, index),), "scatter_add")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g: Tensor):
        out = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(index_select(g, tuple(sl)))
        return out

    return Tensor._result(data, tuple(xs), backward, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    expanded = []
    for x in xs:
        shape = list(x.shape)
        shape.insert(axis % (x.ndim + 1), 1)
        expanded.append(reshape(x, tuple(shape)))
    return concat(expanded, axis=axis)


# elementwise ---------------------------------------------------------------------

def _binary(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data * b.data, (a, b), lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape

    def backward(g: Tensor):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return sum_to(ga, sa), sum_to(gb, sb)

    return Tensor._result(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (neg(g),), "neg")


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return Tensor._result(a.data**p, (a,), lambda g: (mul(g, mul(power(a, p - 1.0), p)),), "pow")


def exp(a: Tensor) -> Tensor:
    out_holder: list[Tensor] = []

    def backward(g: Tensor):
        return (mul(g, out_holder[0]),)

    out = Tensor._result(np.exp(a.data), (a,), backward, "exp")
    out_holder.append(out)
    return out


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of non-positive value")
    return Tensor._result(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    return Tensor._result(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


# reductions ----------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def backward(g: Tensor):
        return (broadcast_to(reshape(g, kept), src),)

    return Tensor._result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# linear algebra ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_flat(a, b)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sa, sb = a.shape, b.shape

    def backward(g: Tensor):
        return sum_to(matmul(g, swap_last(b)), sa), sum_to(matmul(swap_last(a), g), sb)

    return Tensor._result(data, (a, b), backward, "matmul")


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # [..., k] @ [k, n]: fold the leading axes into one 2-D product
    k, n = b.shape
    lead = a.shape[:-1]
    data = (a.data.reshape(-1, k) @ b.data).reshape(lead + (n,))

    def backward(g: Tensor):
        ga = matmul(g, swap_last(b))
        gb = matmul(swap_last(reshape(a, (-1, k))), reshape(g, (-1, n)))
        return ga, gb

    return Tensor._result(data, (a, b), backward, "matmul")


# softmax family ------------------------------------------------------------------

def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction."""
    holder: list[Tensor] = []

    def backward(g: Tensor):
        s = holder[0]
        inner = sum_(mul(g, s), axis=axis, keepdims=True)
        return (mul(s, sub(g, inner)),)

    out = Tensor._result(_softmax_np(x.data, axis), (x,), backward, "softmax")
    holder.append(out)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (each row sums to one)."""
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g: Tensor):
        total = sum_(g, axis=axis, keepdims=True)
        return (sub(g, mul(softmax(x, axis), total)),)

    return Tensor._result(data, (x,), backward, "log_softmax")


def token_nll(logits: Tensor, targets) -> Tensor:
    """Per-position negative log-likelihood ``-log softmax(logits)[..., target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError("target index out of range")
    lp = log_softmax(logits, axis=-1)
    index = tuple(np.indices(targets.shape)) + (targets,)
    return neg(index_select(lp, index))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over positions of the next-token negative log-likelihood."""
    nll = token_nll(logits, targets)
    if nll.size == 0:
        raise ContractError("cross_entropy needs at least one target")
    return mean(nll)


# differentiation -----------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(output: Tensor, seed: Tensor, create_graph: bool) -> tuple[list[Tensor], dict[int, Tensor]]:
    order = _topo(output)
    grads: dict[int, Tensor] = {id(output): seed}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    return order, grads


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to ``inputs`` (leaves or interior nodes).

    Inputs the output does not depend on get a zero tensor.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ContractError("grad of a non-scalar output needs grad_output")
        grad_output = Tensor(np.ones(output.shape))
    if not output.requires_grad:
        return [Tensor(np.zeros(x.shape)) for x in inputs]
    _, grads = _run_backward(output, grad_output, create_graph)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor(np.zeros(x.shape))
        elif not create_graph:
            g = Tensor(g.data)
        out.append(g)
    return out


def backward(loss: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Gradient map for every gradient-tracking leaf reachable from ``loss``.

    Leaves created with ``requires_grad=False`` never appear in the map.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order, grads = _run_backward(loss, Tensor(np.ones(loss.shape)), create_graph)
    result: dict[Tensor, Tensor] = {}
    for node in order:
        if node.is_leaf and id(node) in grads:
            g = grads[id(node)]
            result[node] = g if create_graph else Tensor(g.data)
    return result
