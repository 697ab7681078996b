"""Small reverse-mode differentiation engine over dense numpy arrays.

Graphs are built symbolically from :class:`Node` objects and evaluated later
against a mapping of variable bindings.  :func:`gradient` emits ordinary
nodes, so the result of a gradient can itself be differentiated; this is
what lets the distillation loop differentiate through an SGD step.

Example
-------
>>> x = variable("x")
>>> y = (x * x).sum()
>>> (dy,) = gradient(y, [x])
>>> float(evaluate(dy, {"x": np.array(3.0)}))
6.0
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Node",
    "Graph",
    "NonFiniteError",
    "UnboundVariableError",
    "ShapeError",
    "variable",
    "constant",
    "evaluate",
    "gradient",
    "finite_diff",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "tanh",
    "softmax",
    "softmax_cross_entropy",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "mean_pool",
    "get_default_dtype",
    "set_default_dtype",
    "precision",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class UnboundVariableError(KeyError):
    pass


class ShapeError(ValueError):
    pass


_ids = itertools.count()
_dtype_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_dtype_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype_state.dtype = dtype


class precision:
    """Context manager switching the evaluation dtype, e.g. ``with precision(np.float64):``."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype)

    def __enter__(self):
        self._saved = get_default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


class Node:
    """A vertex of the computation graph.

    Nodes are immutable once created.  ``op`` names an entry of the op table,
    ``inputs`` are parent nodes and ``attrs`` carries static parameters such as
    reduction axes.  Node ids increase monotonically, so sorting by id gives a
    topological order.
    """

    __slots__ = ("id", "op", "inputs", "attrs", "name", "value")

    def __init__(self, op: str, inputs: Sequence["Node"] = (), attrs: dict | None = None,
                 name: str | None = None, value=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name
        self.value = value

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}#{self.id}{label}>"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def variable(name: str) -> Node:
    """A graph input, bound by name at evaluation time."""
    return Node("var", name=name)


def constant(value) -> Node:
    return Node("const", value=np.asarray(value))


# ---------------------------------------------------------------------------
# op table
#
# Each op has a forward (numpy) and a vjp that returns graph nodes, one per
# input, or None for inputs that carry no gradient.
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def _op(name):
    def register(pair):
        fwd, vjp = pair()
        _FORWARD[name] = fwd
        _VJP[name] = vjp
        return pair
    return register


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def matmul(a: Node, b: Node) -> Node:
    return Node("matmul", (a, b))


@_op("matmul")
def _matmul():
    def fwd(node, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul of {a.shape} and {b.shape}")
        return a @ b

    def vjp(node, g):
        a, b = node.inputs
        return matmul(g, transpose(b)), matmul(transpose(a), g)
    return fwd, vjp


def transpose(a: Node) -> Node:
    return Node("transpose", (a,))


@_op("transpose")
def _transpose():
    def fwd(node, a):
        if a.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got {a.shape}")
        return a.T

    def vjp(node, g):
        return (transpose(g),)
    return fwd, vjp


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None


def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b))


@_op("add")
def _add():
    def fwd(node, a, b):
        _check_broadcast(a, b)
        return a + b

    def vjp(node, g):
        a, b = node.inputs
        return sum_to(g, a), sum_to(g, b)
    return fwd, vjp


def sub(a: Node, b: Node) -> Node:
    return add(a, neg(b))


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def scale(a: Node, factor: float) -> Node:
    """Multiply by a fixed python scalar."""
    return Node("scale", (a,), {"factor": float(factor)})


@_op("scale")
def _scale():
    def fwd(node, a):
        return a * a.dtype.type(node.attrs["factor"])

    def vjp(node, g):
        return (scale(g, node.attrs["factor"]),)
    return fwd, vjp


def mul(a: Node, b: Node) -> Node:
    """Elementwise product with numpy broadcasting."""
    return Node("mul", (a, b))


@_op("mul")
def _mul():
    def fwd(node, a, b):
        _check_broadcast(a, b)
        return a * b

    def vjp(node, g):
        a, b = node.inputs
        return sum_to(mul(g, b), a), sum_to(mul(g, a), b)
    return fwd, vjp


def relu(a: Node) -> Node:
    return Node("relu", (a,))


@_op("relu")
def _relu():
    def fwd(node, a):
        return np.maximum(a, 0)

    def vjp(node, g):
        # derivative at exactly 0 is taken as 0
        return (mul(g, Node("step", node.inputs)),)
    return fwd, vjp


@_op("step")
def _step():
    def fwd(node, a):
        return (a > 0).astype(a.dtype)

    def vjp(node, g):
        return (None,)
    return fwd, vjp


def tanh(a: Node) -> Node:
    return Node("tanh", (a,))


@_op("tanh")
def _tanh():
    def fwd(node, a):
        return np.tanh(a)

    def vjp(node, g):
        return (mul(g, sub(constant(1.0), mul(node, node))),)
    return fwd, vjp


def softmax(logits: Node) -> Node:
    """Row-wise softmax over the last axis."""
    return Node("softmax", (logits,))


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@_op("softmax")
def _softmax():
    def fwd(node, z):
        return _softmax_np(z)

    def vjp(node, g):
        gs = mul(g, node)
        return (sub(gs, mul(node, reduce_sum(gs, axis=-1, keepdims=True))),)
    return fwd, vjp


def softmax_cross_entropy(logits: Node, labels: Node) -> Node:
    """Mean cross-entropy of a (batch, classes) logit matrix against integer labels."""
    return Node("softmax_ce", (logits, labels))


@_op("softmax_ce")
def _softmax_ce():
    def fwd(node, z, y):
        if z.ndim != 2:
            raise ShapeError(f"logits must be (batch, classes), got {z.shape}")
        y = np.asarray(y).astype(np.int64).reshape(-1)
        if y.shape[0] != z.shape[0]:
            raise ShapeError(f"{y.shape[0]} labels for {z.shape[0]} rows")
        if z.shape[0] == 0:
            raise ShapeError("empty batch")
        if y.min() < 0 or y.max() >= z.shape[1]:
            raise ValueError("label out of range")
        shifted = z - z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(z.shape[0]), y]
        return np.asarray((logsumexp - picked).mean(), dtype=z.dtype)

    def vjp(node, g):
        z, y = node.inputs
        diff = sub(softmax(z), Node("one_hot", (y, z)))
        return mul(diff, reduce_mean(g, axis=None, keepdims=False, rows_of=z)), None
    return fwd, vjp


@_op("one_hot")
def _one_hot():
    def fwd(node, y, z):
        y = np.asarray(y).astype(np.int64).reshape(-1)
        out = np.zeros(z.shape, dtype=z.dtype)
        out[np.arange(len(y)), y] = 1
        return out

    def vjp(node, g):
        return None, None
    return fwd, vjp


def reduce_sum(a: Node, axis=None, keepdims=False) -> Node:
    return Node("sum", (a,), {"axis": axis, "keepdims": keepdims})


def reduce_mean(a: Node, axis=None, keepdims=False, rows_of: Node | None = None) -> Node:
    """Mean reduction.

    ``rows_of`` is internal: it divides by the leading extent of another node
    instead, which is how the mean-over-batch of the cross-entropy is
    expressed for a scalar upstream gradient.
    """
    if rows_of is not None:
        return Node("div_rows", (a, rows_of))
    return Node("mean", (a,), {"axis": axis, "keepdims": keepdims})


@_op("sum")
def _sum():
    def fwd(node, a):
        return np.asarray(a.sum(axis=node.attrs["axis"], keepdims=node.attrs["keepdims"]))

    def vjp(node, g):
        (a,) = node.inputs
        return (broadcast_to(g, a, node.attrs["axis"], node.attrs["keepdims"], False),)
    return fwd, vjp


@_op("mean")
def _mean():
    def fwd(node, a):
        return np.asarray(a.mean(axis=node.attrs["axis"], keepdims=node.attrs["keepdims"]))

    def vjp(node, g):
        (a,) = node.inputs
        return (broadcast_to(g, a, node.attrs["axis"], node.attrs["keepdims"], True),)
    return fwd, vjp


@_op("div_rows")
def _div_rows():
    def fwd(node, a, ref):
        return a / a.dtype.type(ref.shape[0])

    def vjp(node, g):
        return Node("div_rows", (g, node.inputs[1])), None
    return fwd, vjp


def broadcast_to(g: Node, like: Node, axis, keepdims: bool, normalize: bool) -> Node:
    """Expand ``g`` (the result of reducing ``like`` over ``axis``) back to ``like``'s shape."""
    return Node("bcast", (g, like), {"axis": axis, "keepdims": keepdims, "normalize": normalize})


def sum_to(g: Node, like: Node, axis=None, keepdims=True, normalize=False) -> Node:
    """Sum ``g`` down to ``like``'s shape, undoing numpy broadcasting.

    With ``keepdims=False`` the axes in ``axis`` are summed away first; this
    is the transpose of :func:`broadcast_to`.
    """
    return Node("sumto", (g, like), {"axis": axis, "keepdims": keepdims, "normalize": normalize})


@_op("bcast")
def _bcast():
    def fwd(node, g, like):
        axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
        if not keepdims:
            g = np.expand_dims(g, _axes(axis, like.ndim))
        out = np.broadcast_to(g, like.shape)
        if node.attrs["normalize"]:
            out = out / out.dtype.type(like.size // max(g.size, 1))
        return np.ascontiguousarray(out)

    def vjp(node, h):
        g = node.inputs[0]
        a = node.attrs
        return sum_to(h, g, a["axis"], a["keepdims"], a["normalize"]), None
    return fwd, vjp


@_op("sumto")
def _sumto():
    def fwd(node, h, like):
        axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
        h_size = h.size
        if not keepdims:
            h = h.sum(axis=_axes(axis, h.ndim))
        out = _unbroadcast(h, like.shape).reshape(like.shape)
        if node.attrs["normalize"]:
            out = out / out.dtype.type(h_size // max(like.size, 1))
        return out

    def vjp(node, k):
        h = node.inputs[0]
        a = node.attrs
        return broadcast_to(k, h, a["axis"], a["keepdims"], a["normalize"]), None
    return fwd, vjp


def reshape(a: Node, shape) -> Node:
    return Node("reshape", (a,), {"shape": tuple(shape)})


@_op("reshape")
def _reshape():
    def fwd(node, a):
        try:
            return a.reshape(node.attrs["shape"])
        except ValueError as exc:
            raise ShapeError(str(exc)) from None

    def vjp(node, g):
        return (Node("reshape_like", (g, node.inputs[0])),)
    return fwd, vjp


@_op("reshape_like")
def _reshape_like():
    def fwd(node, g, like):
        return g.reshape(like.shape)

    def vjp(node, h):
        return Node("reshape_like", (h, node.inputs[0])), None
    return fwd, vjp


def mean_pool(a: Node, size: int = 2) -> Node:
    """Non-overlapping average pooling of a (batch, H, W, C) tensor."""
    return Node("mean_pool", (a,), {"size": int(size)})


@_op("mean_pool")
def _mean_pool():
    def fwd(node, a):
        k = node.attrs["size"]
        if a.ndim != 4 or a.shape[1] % k or a.shape[2] % k:
            raise ShapeError(f"mean_pool({k}) on shape {a.shape}")
        b, h, w, c = a.shape
        return a.reshape(b, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def vjp(node, g):
        return (Node("unpool", (g,), node.attrs),)
    return fwd, vjp


@_op("unpool")
def _unpool():
    def fwd(node, g):
        k = node.attrs["size"]
        return np.repeat(np.repeat(g, k, axis=1), k, axis=2) / g.dtype.type(k * k)

    def vjp(node, h):
        return (mean_pool(h, node.attrs["size"]),)
    return fwd, vjp


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _ancestors(outputs: Iterable[Node]) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = list(outputs)
    while stack:
        n = stack.pop()
        if n.id in seen:
            continue
        seen[n.id] = n
        stack.extend(n.inputs)
    return [seen[i] for i in sorted(seen)]


class Graph:
    """A compiled evaluation plan for a fixed set of output nodes.

    Compiling once and calling :meth:`run` repeatedly avoids re-walking the
    graph; a Graph holds no mutable state and can be shared between threads.
    """

    def __init__(self, outputs: Sequence[Node]):
        self.outputs = tuple(outputs)
        self.order = _ancestors(self.outputs)
        self.variables = sorted({n.name for n in self.order if n.op == "var"})

    def run(self, bindings: Mapping[str, object], dtype=None) -> list[np.ndarray]:
        dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
        values: dict[int, np.ndarray] = {}
        for node in self.order:
            if node.op == "var":
                if node.name not in bindings:
                    raise UnboundVariableError(node.name)
                values[node.id] = _coerce(bindings[node.name], dtype)
                continue
            if node.op == "const":
                values[node.id] = _coerce(node.value, dtype)
                continue
            args = [values[p.id] for p in node.inputs]
            with np.errstate(over="ignore", invalid="ignore"):
                out = np.asarray(_FORWARD[node.op](node, *args))
            if out.dtype.kind == "f" and not np.isfinite(out).all():
                raise NonFiniteError(f"non-finite value produced by {node!r}")
            values[node.id] = out
        return [values[n.id] for n in self.outputs]

    __call__ = run


def _coerce(value, dtype):
    arr = np.asarray(value)
    if arr.dtype.kind == "f" or arr.dtype.kind == "b":
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind in "iu":
        # integer bindings are labels; keep them integral
        return arr
    return arr.astype(dtype)


def evaluate(nodes, bindings: Mapping[str, object] | None = None, dtype=None):
    """Evaluate one node or a sequence of nodes against ``bindings``."""
    single = isinstance(nodes, Node)
    outs = Graph([nodes] if single else list(nodes)).run(bindings or {}, dtype=dtype)
    return outs[0] if single else outs


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def gradient(target: Node, wrt: Sequence[Node]) -> list[Node]:
    """Nodes computing d(target)/d(v) for each v in ``wrt``.

    ``target`` must evaluate to a scalar; this is checked when the result is
    evaluated, since shapes are only known then.  Variables that ``target``
    does not depend on get a zero tensor of their bound shape.
    """
    order = _ancestors([target])
    on_path = {n.id for n in order}
    adjoint: dict[int, Node] = {target.id: Node("ones_like_scalar", (target,))}
    for node in reversed(order):
        g = adjoint.get(node.id)
        if g is None or node.op in ("var", "const"):
            continue
        parts = _VJP[node.op](node, g)
        for parent, part in zip(node.inputs, parts):
            if part is None or parent.id not in on_path:
                continue
            prev = adjoint.get(parent.id)
            adjoint[parent.id] = part if prev is None else add(prev, part)
    return [adjoint.get(v.id) or Node("zeros_like", (v,)) for v in wrt]


@_op("ones_like_scalar")
def _ones():
    def fwd(node, t):
        if t.shape != ():
            raise ShapeError(f"gradient target must be a scalar, got shape {t.shape}")
        return np.ones((), dtype=t.dtype)

    def vjp(node, g):
        return (None,)
    return fwd, vjp


@_op("zeros_like")
def _zeros():
    def fwd(node, v):
        return np.zeros_like(v)

    def vjp(node, g):
        return (None,)
    return fwd, vjp


def finite_diff(fn: Callable[[np.ndarray], float], point, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fplus = float(fn(x.copy()))
        flat[i] = orig - eps
        fminus = float(fn(x.copy()))
        flat[i] = orig
        if not (np.isfinite(fplus) and np.isfinite(fminus)):
            raise NonFiniteError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fplus - fminus) / (2 * eps)
    return grad
