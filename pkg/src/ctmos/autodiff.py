"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Every differentiable operation appends one node to the tape of the
:class:`Graph` that owns its inputs.  Node ids are tape positions, so the tape
is already in topological order and ``Graph.backward`` is a single reverse
sweep.  Operations whose inputs carry no gradient are evaluated eagerly and
never touch a tape, which makes evaluation passes cheap.

Values are float64 throughout.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError, ValidationError

Array = np.ndarray


class Tensor:
    """A float64 array that may participate in a :class:`Graph`."""

    __slots__ = ("value", "grad", "graph", "node_id", "requires_grad", "name")

    def __init__(self, value, graph=None, node_id=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self.graph = graph
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> Array:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: getitem(self, key)


class Node(NamedTuple):
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[Array], tuple] | None


class Graph:
    """Ordered record of the operations needed to differentiate one loss."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._swept = False

    def __len__(self):
        return len(self.nodes)

    def param(self, value, name=None) -> Tensor:
        """Register a leaf that receives a gradient."""
        t = Tensor(np.array(value, dtype=np.float64), self, len(self.nodes), True, name)
        self.nodes.append(Node("leaf", (), t, None))
        return t

    def constant(self, value, name=None) -> Tensor:
        return Tensor(value, None, None, False, name)

    @property
    def leaves(self) -> list[Tensor]:
        return [n.output for n in self.nodes if n.kind == "leaf"]

    def record(self, kind, inputs, value, backward) -> Tensor:
        if self._swept:
            raise ContractError("graph already differentiated; build a new graph")
        t = Tensor(value, self, len(self.nodes), True)
        self.nodes.append(Node(kind, tuple(inputs), t, backward))
        return t

    def validate(self) -> None:
        """Raise ValidationError if any recorded value is NaN or Inf."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.value)):
                raise ValidationError(
                    f"non-finite value at node {node.output.node_id} ({node.kind})")

    def backward(self, loss: Tensor) -> dict:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

        Returns a mapping from leaf name (or node id when unnamed) to gradient.
        Leaves the loss does not depend on receive zeros.
        """
        if loss.graph is not self or loss.node_id is None:
            raise ContractError("loss is not a node of this graph")
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if self._swept:
            raise ContractError("backward may run only once per graph")
        self._swept = True

        grads: dict[int, Array] = {loss.node_id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            out = node.output
            if node.kind == "leaf":
                g = grads.get(out.node_id)
                out.grad = np.zeros_like(out.value) if g is None else g
                continue
            g = grads.pop(out.node_id, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        for node in self.nodes[loss.node_id + 1:]:
            if node.kind == "leaf":
                node.output.grad = np.zeros_like(node.output.value)

        return {(leaf.name if leaf.name is not None else leaf.node_id): leaf.grad
                for leaf in self.leaves}


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(kind: str, inputs: Sequence[Tensor], value: Array, backward) -> Tensor:
    graph = None
    for t in inputs:
        if t.requires_grad:
            if graph is None:
                graph = t.graph
            elif t.graph is not graph:
                raise ContractError("operands belong to different graphs")
    if graph is None:
        return Tensor(value)
    return graph.record(kind, inputs, value, backward)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


# -- element-wise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("add", (a, b), a.value + b.value,
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _op("sub", (a, b), a.value - b.value,
               lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _op("neg", (a,), -a.value, lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return _op("mul", (a, b), a.value * b.value, backward)


def div(a, b) -> Tensor:
    """Element-wise a / b, differentiable in both operands."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def backward(g):
        q = g / b.value
        ga = _unbroadcast(q, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-q * out, b.shape) if b.requires_grad else None
        return ga, gb

    return _op("div", (a, b), out, backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _op("square", (a,), a.value * a.value, lambda g: (2.0 * a.value * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _op("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _op("log", (a,), np.log(a.value), lambda g: (g / a.value,))


def log_floor(a, floor: float) -> Tensor:
    """log(max(a, floor)); the gradient is zero where the floor binds."""
    a = as_tensor(a)
    clipped = np.maximum(a.value, floor)
    live = a.value > floor
    return _op("log_floor", (a,), np.log(clipped),
               lambda g: (np.where(live, g / clipped, 0.0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _op("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.value)
    return _op("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where no clamping happened."""
    a = as_tensor(a)
    out = np.clip(a.value, lo, hi)
    live = (a.value >= lo) & (a.value <= hi)
    return _op("clip", (a,), out, lambda g: (np.where(live, g, 0.0),))


def detach(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value)


# -- reductions and normalization -------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _op("sum", (a,), out, backward)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    """exp(a_i) / sum_j exp(a_j) along ``axis``, evaluated with max-subtraction."""
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    if not np.all(np.isfinite(a.value)):
        raise ValidationError("softmax input contains NaN or Inf")
    e = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _op("softmax", (a,), out, backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    """a_i - log sum_j exp(a_j) along ``axis``.

    The backward pass writes g - p * sum(g) as g * (1 - p) - p * (sum(g) - g)
    with 1 - p = -expm1(log p), which keeps tiny gradients accurate when one
    class holds almost all of the mass.
    """
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    if not np.all(np.isfinite(a.value)):
        raise ValidationError("log_softmax input contains NaN or Inf")
    top = np.expand_dims(a.value.argmax(axis=axis), axis)
    shifted = a.value - np.take_along_axis(a.value, top, axis=axis)
    # the maximum contributes exactly 1; log1p keeps the remainder's precision
    rest = np.exp(shifted)
    np.put_along_axis(rest, top, 0.0, axis=axis)
    out = shifted - np.log1p(rest.sum(axis=axis, keepdims=True))

    def backward(g):
        p = np.exp(out)
        rest = g.sum(axis=axis, keepdims=True) - g
        return (-g * np.expm1(out) - p * rest,)

    return _op("log_softmax", (a,), out, backward)


# -- linear algebra and indexing ---------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape)
        return ga, gb

    return _op("matmul", (a, b), a.value @ b.value, backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _op("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _op("swapaxes", (a,), np.swapaxes(a.value, ax1, ax2),
               lambda g: (np.swapaxes(g, ax1, ax2),))


def _is_basic(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis), type(None))) for k in items)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(key)

    def backward(g):
        gx = np.zeros_like(a.value)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _op("getitem", (a,), a.value[key], backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _op("stack", ts, out, backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _op("concat", ts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer id array of any shape."""
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding id out of range")

    def backward(g):
        gw = np.zeros_like(weight.value)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _op("embedding", (weight,), weight.value[ids], backward)


def pick(a, index) -> Tensor:
    """Select ``a[..., index[...]]``: one entry of the last axis per leading position."""
    a = as_tensor(a)
    index = np.asarray(index)[..., None]
    if index.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"pick index shape {index.shape[:-1]} vs {a.shape[:-1]}")
    out = np.take_along_axis(a.value, index, axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(a.value)
        np.put_along_axis(gx, index, g[..., None], axis=-1)
        return (gx,)

    return _op("pick", (a,), out, backward)


# -- verification ------------------------------------------------------------

def finite_difference_gradient(fn: Callable[[dict], float], params: dict,
                               eps: float = 1e-6) -> dict:
    """Central-difference estimate of d fn / d params for every coordinate.

    ``fn`` must be deterministic (freeze dropout masks beforehand); it is
    evaluated twice at the base point and a mismatch raises ContractError.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps={eps} outside [1e-7, 1e-3]")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    if fn(work) != fn(work):
        raise ContractError("function is not deterministic; freeze its randomness")
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(work)
            flat[i] = orig - eps
            lo = fn(work)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Largest element-wise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def tensor_relative_error(a, b, floor: float = 1e-12) -> float:
    """max|a - b| / max(max|a|, max|b|, floor): error scaled by the tensor's magnitude."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)
