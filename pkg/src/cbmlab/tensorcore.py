"""Dense-array computation graph with reverse-mode differentiation.

A :class:`ValueGraph` is a flat, topologically ordered list of primitive
nodes over float64 arrays.  Graphs are cheap to build and are rebuilt for
every batch; nothing is mutated between training steps.

Broadcasting is restricted to leading axes: an operand of ``add``/``mul``
may have a shape equal to a *suffix* of the other operand's shape
(``(d,)`` against ``(B, d)``, or ``()`` against anything).

Example::

    g = ValueGraph()
    x = g.input("x")
    w = g.param("w", np.zeros((3, 1)))
    loss = g.mean(g.sigmoid(g.matmul(x, w)), name="loss")
    g.evaluate({"x": np.ones((4, 3))})
    grads = g.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

LEAKY_SLOPE = 0.01


class GraphError(ValueError):
    """Raised for malformed graphs or invalid evaluation requests."""

    def __init__(self, message: str, node: str | None = None):
        self.node = node
        if node is not None:
            message = f"node {node!r}: {message}"
        super().__init__(message)


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


@dataclass(eq=False)
class Node:
    index: int
    op: str
    inputs: tuple["Node", ...]
    name: str
    attrs: dict = field(default_factory=dict)
    needs_grad: bool = False

    def __repr__(self) -> str:
        return f"Node({self.name!r}, op={self.op!r})"


def as_dense(value) -> np.ndarray:
    """Copy ``value`` into a finite float64 array (the DenseArray contract)."""
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("dense arrays must be finite")
    return arr


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _suffix(small: tuple, big: tuple) -> bool:
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _broadcast_shape(node: Node, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or _suffix(a.shape, b.shape) or _suffix(b.shape, a.shape):
        return
    raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}", node.name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# -- forward rules ----------------------------------------------------------

def _fw_matmul(node, a, b):
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}", node.name)
    return a @ b


def _fw_add(node, a, b):
    _broadcast_shape(node, a, b)
    return a + b


def _fw_mul(node, a, b):
    _broadcast_shape(node, a, b)
    return a * b


def _fw_concat(node, *xs):
    lead = {x.shape[:-1] for x in xs}
    if len(lead) != 1 or any(x.ndim == 0 for x in xs):
        raise ShapeError(f"concat of {[x.shape for x in xs]}", node.name)
    return np.concatenate(xs, axis=-1)


def _fw_slice(node, a):
    start, stop = node.attrs["start"], node.attrs["stop"]
    if a.ndim == 0 or not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] of {a.shape}", node.name)
    return a[..., start:stop]


def _fw_rowsum(node, a):
    if a.ndim == 0:
        raise ShapeError("row_sum of a scalar", node.name)
    return a.sum(axis=-1)


def _fw_softmax(node, a):
    if a.ndim == 0:
        raise ShapeError("softmax of a scalar", node.name)
    return softmax(a)


def _fw_select(node, cond, a, b):
    if not (cond.shape == a.shape == b.shape):
        raise ShapeError(f"select over {cond.shape}, {a.shape}, {b.shape}", node.name)
    return np.where(cond > 0, a, b)


_FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "mul": _fw_mul,
    "neg": lambda node, a: -a,
    "exp": lambda node, a: np.exp(a),
    "log": lambda node, a: np.log(a),
    "sigmoid": lambda node, a: sigmoid(a),
    "softmax": _fw_softmax,
    "concat": _fw_concat,
    "row_sum": _fw_rowsum,
    "mean": lambda node, a: np.asarray(a.mean()),
    "slice": _fw_slice,
    "stop_gradient": lambda node, a: a,
    "select": _fw_select,
}


# -- backward rules: return one gradient (or None) per input ---------------

def _bw_matmul(node, g, out, a, b):
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    return g @ b.T, a.T @ g


def _bw_add(node, g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_mul(node, g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bw_softmax(node, g, out, a):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _bw_concat(node, g, out, *xs):
    grads, start = [], 0
    for x in xs:
        stop = start + x.shape[-1]
        grads.append(g[..., start:stop])
        start = stop
    return tuple(grads)


def _bw_slice(node, g, out, a):
    full = np.zeros_like(a)
    full[..., node.attrs["start"]:node.attrs["stop"]] = g
    return (full,)


def _bw_select(node, g, out, cond, a, b):
    m = cond > 0
    return None, np.where(m, g, 0.0), np.where(m, 0.0, g)


_BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "mul": _bw_mul,
    "neg": lambda node, g, out, a: (-g,),
    "exp": lambda node, g, out, a: (g * out,),
    "log": lambda node, g, out, a: (g / a,),
    "sigmoid": lambda node, g, out, a: (g * out * (1.0 - out),),
    "softmax": _bw_softmax,
    "concat": _bw_concat,
    "row_sum": lambda node, g, out, a: (np.broadcast_to(g[..., None], a.shape),),
    "mean": lambda node, g, out, a: (np.full(a.shape, g / a.size),),
    "slice": _bw_slice,
    "stop_gradient": lambda node, g, out, a: (None,),
    "select": _bw_select,
}


class ValueGraph:
    """An append-only computation graph.

    Leaves are inputs (bound at evaluation time), constants, or named
    trainable parameters.  Every other node applies one primitive.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self._by_name: dict[str, Node] = {}
        self._values: list[np.ndarray] | None = None

    # -- construction ------------------------------------------------------

    def _add(self, op: str, inputs: Iterable[Node], name: str | None = None, **attrs) -> Node:
        inputs = tuple(inputs)
        for x in inputs:
            if not isinstance(x, Node) or x.index >= len(self.nodes) or self.nodes[x.index] is not x:
                raise GraphError(f"operand {x!r} does not belong to this graph", name)
        index = len(self.nodes)
        if name is None:
            name = f"{op}_{index}"
        if name in self._by_name:
            raise GraphError("duplicate node name", name)
        needs = op == "param" or (op != "stop_gradient" and any(x.needs_grad for x in inputs))
        node = Node(index, op, inputs, name, attrs, needs)
        self.nodes.append(node)
        self._by_name[name] = node
        self._values = None
        return node

    def input(self, name: str) -> Node:
        return self._add("input", (), name)

    def const(self, value, name: str | None = None) -> Node:
        return self._add("const", (), name, value=as_dense(value))

    def param(self, name: str, value) -> Node:
        node = self._add("param", (), name)
        self.params[name] = as_dense(value)
        return node

    def node(self, name: str) -> Node:
        return self._by_name[name]

    def matmul(self, a, b, name=None): return self._add("matmul", (a, b), name)
    def add(self, a, b, name=None): return self._add("add", (a, b), name)
    def mul(self, a, b, name=None): return self._add("mul", (a, b), name)
    def neg(self, a, name=None): return self._add("neg", (a,), name)
    def exp(self, a, name=None): return self._add("exp", (a,), name)
    def log(self, a, name=None): return self._add("log", (a,), name)
    def sigmoid(self, a, name=None): return self._add("sigmoid", (a,), name)
    def softmax(self, a, name=None): return self._add("softmax", (a,), name)
    def concat(self, xs, name=None): return self._add("concat", xs, name)
    def row_sum(self, a, name=None): return self._add("row_sum", (a,), name)
    def mean(self, a, name=None): return self._add("mean", (a,), name)
    def stop_gradient(self, a, name=None): return self._add("stop_gradient", (a,), name)

    def slice(self, a, start: int, stop: int, name=None):
        return self._add("slice", (a,), name, start=int(start), stop=int(stop))

    def select(self, cond, a, b, name=None):
        """Entries of ``a`` where ``cond > 0``, else ``b``; ``cond`` gets no gradient."""
        return self._add("select", (cond, a, b), name)

    # -- small composites (expressed with primitives only) -----------------

    def sub(self, a, b, name=None):
        return self.add(a, self.neg(b), name)

    def scale(self, a, factor: float, name=None):
        return self.mul(a, self.const(float(factor)), name)

    def one_minus(self, a, name=None):
        return self.add(self.const(1.0), self.neg(a), name)

    def leaky_relu(self, a, slope: float = LEAKY_SLOPE, name=None):
        return self.select(a, a, self.scale(a, slope), name)

    def log_sigmoid(self, a, name=None):
        """``log(sigmoid(a)) = min(a, 0) - log(1 + exp(-|a|))``; finite for any finite ``a``."""
        neg_abs = self.select(a, self.neg(a), a)
        lower = self.select(a, self.scale(a, 0.0), a)
        return self.sub(lower, self.log(self.add(self.const(1.0), self.exp(neg_abs))), name)

    # -- evaluation ---------------------------------------------------------

    def _resolve(self, ref) -> Node:
        if isinstance(ref, Node):
            return ref
        try:
            return self._by_name[ref]
        except KeyError:
            raise GraphError("no such node", str(ref)) from None

    def evaluate(self, bindings: Mapping[str, object] | None = None,
                 outputs: Iterable | None = None) -> dict[str, np.ndarray]:
        """Evaluate every node; return ``{name: value}`` for ``outputs`` (default: all)."""
        bindings = dict(bindings or {})
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "input":
                if node.name not in bindings:
                    raise GraphError("input is not bound", node.name)
                val = np.asarray(bindings[node.name], dtype=np.float64)
            elif node.op == "const":
                val = node.attrs["value"]
            elif node.op == "param":
                val = self.params[node.name]
            else:
                args = [values[x.index] for x in node.inputs]
                with np.errstate(all="ignore"):
                    val = _FORWARD[node.op](node, *args)
            if not np.all(np.isfinite(val)):
                raise NonFiniteError("non-finite value", node.name)
            values.append(val)
        self._values = values
        wanted = self.nodes if outputs is None else [self._resolve(o) for o in outputs]
        return {n.name: values[n.index] for n in wanted}

    def value(self, ref) -> np.ndarray:
        if self._values is None:
            raise GraphError("graph has not been evaluated")
        return self._values[self._resolve(ref).index]

    def backward(self, loss) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` node with respect to every parameter."""
        if self._values is None:
            raise GraphError("graph has not been evaluated")
        loss = self._resolve(loss)
        values = self._values
        if values[loss.index].shape != ():
            raise GraphError(f"loss must be scalar, got shape {values[loss.index].shape}", loss.name)
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.asarray(1.0)
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads[node.index]
            if g is None or not node.inputs or not node.needs_grad:
                continue
            args = [values[x.index] for x in node.inputs]
            for x, gx in zip(node.inputs, _BACKWARD[node.op](node, g, values[node.index], *args)):
                if gx is None or not x.needs_grad:
                    continue
                grads[x.index] = gx if grads[x.index] is None else grads[x.index] + gx
        out = {}
        for name, arr in self.params.items():
            g = grads[self._by_name[name].index]
            out[name] = np.zeros_like(arr) if g is None else np.array(g, dtype=np.float64)
        return out


def evaluate(graph: ValueGraph, bindings: Mapping[str, object] | None = None,
             outputs: Iterable | None = None) -> dict[str, np.ndarray]:
    return graph.evaluate(bindings, outputs)


def backward(graph: ValueGraph, loss) -> dict[str, np.ndarray]:
    return graph.backward(loss)


def check_gradients(graph: ValueGraph, loss, epsilon: float = 1e-4,
                    bindings: Mapping[str, object] | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Every coordinate of every parameter is perturbed by ``±epsilon``.  The
    relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    graph.evaluate(bindings)
    analytic = graph.backward(loss)
    loss_node = graph._resolve(loss)
    worst = 0.0
    try:
        for name, arr in graph.params.items():
            flat = arr.reshape(-1)
            grad = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = float(graph.evaluate(bindings, [loss_node])[loss_node.name])
                flat[i] = orig - epsilon
                down = float(graph.evaluate(bindings, [loss_node])[loss_node.name])
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                denom = max(abs(grad[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(grad[i] - numeric) / denom)
    except NonFiniteError as exc:
        raise NonFiniteError("loss became non-finite under perturbation", exc.node) from exc
    finally:
        graph.evaluate(bindings)
    return worst
