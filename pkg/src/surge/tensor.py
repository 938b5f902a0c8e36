"""A small define-by-run reverse-mode autodiff engine over float64 numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Tensor` values
together with a vector-Jacobian rule. ``tape.backward(loss)`` walks the
records in reverse and returns a :class:`Gradients` map holding one adjoint per
node (zeros for nodes the loss does not depend on).

Custom gradient rules (surrogate sign derivatives, stop-gradient, gradient
gates) are recorded with :meth:`Tape.record`, which takes the forward value and
the rule directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from surge import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"{op}: forward value is not finite")


class Parameter:
    """A named, mutable float64 array updated between training steps."""

    def __init__(self, data, name=""):
        self.data = np.array(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tensor:
    """A value living on a tape. Arithmetic operators record primitives."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.data.shape

    @property
    def kind(self):
        return self.tape.nodes[self.id].kind

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self._lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __repr__(self):
        return f"Tensor(id={self.id}, kind={self.kind!r}, shape={self.shape})"


class Gradients:
    """Adjoints indexed by node id, Tensor, or watched Parameter."""

    def __init__(self, tape: "Tape", adjoints: list[np.ndarray]):
        self.tape = tape
        self._adj = adjoints

    def __getitem__(self, key) -> np.ndarray:
        if isinstance(key, Tensor):
            if key.tape is not self.tape:
                raise KeyError("tensor belongs to a different tape")
            return self._adj[key.id]
        if isinstance(key, Parameter):
            node = self.tape.param_nodes.get(id(key))
            if node is None:
                return np.zeros_like(key.data)
            return self._adj[node]
        return self._adj[key]

    def __len__(self):
        return len(self._adj)

    def items(self):
        return enumerate(self._adj)


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    param_nodes: dict[int, int] = field(default_factory=dict)
    check_finite: bool = True

    def _push(self, kind, inputs, value, vjp) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(kind)
        self.nodes.append(Node(kind, tuple(t.id for t in inputs), value, vjp))
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value, kind="leaf") -> Tensor:
        return self._push(kind, (), np.array(value, dtype=np.float64), None)

    def constant(self, value) -> Tensor:
        return self.leaf(value, kind="const")

    def watch(self, param: Parameter) -> Tensor:
        """Leaf bound to a parameter; repeated calls return the same node."""
        node = self.param_nodes.get(id(param))
        if node is not None:
            return Tensor(self, node)
        t = self.leaf(param.data.copy(), kind="param")
        self.param_nodes[id(param)] = t.id
        return t

    def record(self, kind, inputs: Sequence[Tensor], value, vjp) -> Tensor:
        """Record a primitive with an explicit forward value and VJP rule.

        ``vjp(upstream)`` must return one adjoint (or None) per input.
        """
        for t in inputs:
            if t.tape is not self:
                raise ValueError(f"{kind}: input tensor belongs to a different tape")
        return self._push(kind, inputs, value, vjp)

    def count(self, kind) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def backward(self, loss: Tensor) -> Gradients:
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        adj = [np.zeros_like(n.value) for n in self.nodes]
        adj[loss.id] = np.ones_like(self.nodes[loss.id].value)
        for i in range(loss.id, -1, -1):
            node = self.nodes[i]
            if node.vjp is None or not node.inputs:
                continue
            g = adj[i]
            if not g.any():
                continue
            for src, contrib in zip(node.inputs, node.vjp(g)):
                if contrib is not None:
                    adj[src] = adj[src] + contrib
        return Gradients(self, adj)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    return tape.backward(loss)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record("add", (a, b), a.data + b.data,
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.tape.record("sub", (a, b), a.data - b.data,
                         lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    av, bv = a.data, b.data
    return a.tape.record("mul", (a, b), av * bv,
                         lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (not a tape value)."""
    c = float(c)
    return a.tape.record("scalar-mul", (a,), c * a.data, lambda g: (c * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.data, b.data
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} are incompatible")

    def vjp(g):
        a2 = av.reshape(1, -1) if av.ndim == 1 else av
        b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(av.shape), (a2.T @ g2).reshape(bv.shape)

    return a.tape.record("matmul", (a, b), av @ bv, vjp)


def matmul_nt(a: Tensor, b: Tensor, kernel=None) -> Tensor:
    """``a @ b.T`` for a of shape (n, k) or (k,) and b of shape (m, k).

    ``kernel`` may replace the forward product (used for the XNOR path on
    +-1 operands); the adjoints are the ordinary matmul ones.
    """
    av, bv = a.data, b.data
    if av.ndim not in (1, 2) or bv.ndim != 2 or av.shape[-1] != bv.shape[1]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape}^T are incompatible")
    a2 = av.reshape(1, -1) if av.ndim == 1 else av
    out = kernel(a2, bv) if kernel is not None else a2 @ bv.T
    if av.ndim == 1:
        out = out.reshape(-1)

    def vjp(g):
        g2 = g.reshape(a2.shape[0], bv.shape[0])
        return (g2 @ bv).reshape(av.shape), g2.T @ a2

    return a.tape.record("matmul", (a, b), out, vjp)


def _check_conv(x, w):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} are incompatible")
    k = w.shape[2]
    if w.shape[3] != k or k % 2 != 1:
        raise ShapeError(f"conv2d: only odd square kernels are supported, got {w.shape[2:]}")


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1, size-preserving (zero padded) cross-correlation."""
    xv, wv = x.data, w.data
    _check_conv(xv, wv)
    k = wv.shape[2]
    return x.tape.record(
        "conv2d", (x, w), kernels.conv2d_same(xv, wv),
        lambda g: (kernels.conv2d_same_grad_input(g, wv), kernels.conv2d_same_grad_weight(xv, g, k)),
    )


def relu(x: Tensor) -> Tensor:
    xv = x.data
    return x.tape.record("relu", (x,), np.maximum(xv, 0.0), lambda g: (g * (xv > 0),))


def square(x: Tensor) -> Tensor:
    xv = x.data
    return x.tape.record("square", (x,), xv * xv, lambda g: (2.0 * xv * g,))


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape.record("sum", (x,), np.sum(x.data), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return x.tape.record("mean", (x,), np.mean(x.data), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def l2_norm(x: Tensor) -> Tensor:
    xv = x.data
    nrm = float(np.sqrt(np.sum(xv * xv)))

    def vjp(g):
        if nrm == 0.0:
            return (np.zeros_like(xv),)
        return (g * xv / nrm,)

    return x.tape.record("l2_norm", (x,), nrm, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return x.tape.record("reshape", (x,), out, lambda g: (g.reshape(old),))


def index(x: Tensor, i) -> Tensor:
    """Select ``x[i]`` (basic indexing)."""
    xv = x.data

    def vjp(g):
        out = np.zeros_like(xv)
        out[i] = g
        return (out,)

    return x.tape.record("index", (x,), np.array(xv[i]), vjp)


def mean_axes(x: Tensor, axes) -> Tensor:
    xv = x.data
    axes = tuple(axes)
    n = int(np.prod([xv.shape[a] for a in axes]))
    out = xv.mean(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / n, xv.shape).copy(),)

    return x.tape.record("mean", (x,), out, vjp)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward (the same float64 values); zero adjoint to ``x``."""
    return x.tape.record("stop_gradient", (x,), x.data.copy(), lambda g: (None,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} and labels {labels.shape} are incompatible")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return logits.tape.record("softmax_cross_entropy", (logits,), loss, vjp)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "elementwise-mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d-stride1": conv2d,
    "relu": relu,
    "square": square,
    "sum": sum_,
    "mean": mean,
    "l2_norm": l2_norm,
    "scalar-mul": scale,
    "stop_gradient": stop_gradient,
}


def record_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered primitive by name, e.g. ``record_primitive("relu", x)``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)


def numeric_grad(f, x, step=1e-5):
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g
