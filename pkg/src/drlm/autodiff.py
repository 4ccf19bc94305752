"""Define-by-run reverse-mode automatic differentiation over 2-D float64 arrays.

Every value is a 2-D array; column vectors have shape ``(n, 1)`` and scalars
``(1, 1)``.  A :class:`Tape` records nodes in creation order, which is a valid
topological order, and :meth:`Tape.backward` sweeps it once in reverse.

Column-wise reductions (softmax, log-softmax, logsumexp, pick-log-prob) treat
each column of a matrix as an independent vector so a whole sentence can be
scored with a single matrix of logits.
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "op", "attrs", "tape", "name")

    def __init__(self, value, tape, op=None, parents=(), attrs=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.op = op
        self.attrs = attrs
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value[0, 0])

    def __repr__(self):
        label = self.name or self.op or "leaf"
        return f"Node({label}, shape={self.value.shape})"


class Primitive(NamedTuple):
    forward: Callable
    backward: Callable


def _shapes(op, *arrays):
    return f"{op}: incompatible shapes " + " and ".join(str(a.shape) for a in arrays)


def _broadcast_ok(a, b):
    return a.shape == b.shape or (b.shape[1] == 1 and b.shape[0] == a.shape[0])


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


# -- forward / backward rules ------------------------------------------------
# backward(g, out, *input_values, **attrs) -> one gradient (or None) per input


def _matmul_fwd(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(_shapes("matmul", a, b))
    return a @ b


def _matmul_bwd(g, out, a, b):
    return g @ b.T, a.T @ g


def _add_fwd(a, b):
    if not _broadcast_ok(a, b):
        raise ShapeError(_shapes("add", a, b))
    return a + b


def _add_bwd(g, out, a, b):
    return g, _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    if not _broadcast_ok(a, b):
        raise ShapeError(_shapes("sub", a, b))
    return a - b


def _sub_bwd(g, out, a, b):
    return g, -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    if not _broadcast_ok(a, b):
        raise ShapeError(_shapes("mul", a, b))
    return a * b


def _mul_bwd(g, out, a, b):
    return g * b, _unbroadcast(g * a, b.shape)


def _scale_fwd(a, factor):
    return a * factor


def _scale_bwd(g, out, a, factor):
    return (g * factor,)


def _tanh_fwd(a):
    return np.tanh(a)


def _tanh_bwd(g, out, a):
    return (g * (1.0 - out * out),)


def _sigmoid_fwd(a):
    # tanh form is overflow-free and keeps the input dtype
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _sigmoid_bwd(g, out, a):
    return (g * out * (1.0 - out),)


def _gate_activations(gates, hidden):
    # one tanh call: sigmoid(x) = (1 + tanh(x / 2)) / 2 on the first three blocks
    split = 3 * hidden
    scaled = gates.copy()
    scaled[:split] *= 0.5
    act = np.tanh(scaled)
    act[:split] = 0.5 * (1.0 + act[:split])
    return act[:hidden], act[hidden : 2 * hidden], act[2 * hidden : split], act[split:]


def _lstm_cell_fwd(x_gates, rec_gates, prev):
    """prev and the result stack [h; c_mem]; gate pre-activations are x + rec."""
    hidden = prev.shape[0] // 2
    if x_gates.shape != (4 * hidden, 1) or rec_gates.shape != x_gates.shape or prev.shape[1] != 1:
        raise ShapeError(_shapes("lstm-cell", x_gates, rec_gates, prev))
    i, f, o, g = _gate_activations(x_gates + rec_gates, hidden)
    c = f * prev[hidden:] + i * g
    return np.concatenate([o * np.tanh(c), c])


def _lstm_cell_bwd(grad, out, x_gates, rec_gates, prev):
    hidden = prev.shape[0] // 2
    i, f, o, g = _gate_activations(x_gates + rec_gates, hidden)
    tc = np.tanh(out[hidden:])
    gh, gc = grad[:hidden], grad[hidden:]
    dc = gc + gh * o * (1.0 - tc * tc)
    d_gates = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * prev[hidden:] * f * (1.0 - f),
            gh * tc * o * (1.0 - o),
            dc * i * (1.0 - g * g),
        ]
    )
    d_prev = np.concatenate([np.zeros_like(dc), dc * f])
    return d_gates, d_gates, d_prev


def _concat_fwd(*arrays, axis):
    other = 1 - axis
    if len({x.shape[other] for x in arrays}) != 1:
        raise ShapeError(_shapes(f"concat(axis={axis})", *arrays))
    return np.concatenate(arrays, axis=axis)


def _concat_bwd(g, out, *arrays, axis):
    edges = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, edges, axis=axis))


def _rows_fwd(a, start, stop):
    if not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"rows: slice [{start}:{stop}] outside shape {a.shape}")
    return a[start:stop]


def _rows_bwd(g, out, a, start, stop):
    full = np.zeros_like(a)
    full[start:stop] = g
    return (full,)


def _columns_fwd(a, start, stop):
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"columns: slice [{start}:{stop}] outside shape {a.shape}")
    return a[:, start:stop]


def _columns_bwd(g, out, a, start, stop):
    full = np.zeros_like(a)
    full[:, start:stop] = g
    return (full,)


def _lookup_fwd(table, ids):
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[1]):
        raise IndexError(f"lookup: ids outside [0, {table.shape[1]})")
    return table[:, ids]


def _lookup_bwd(g, out, table, ids):
    full = np.zeros_like(table)
    np.add.at(full.T, np.asarray(ids, dtype=np.intp), g.T)
    return (full,)


def _dropout_fwd(a, mask):
    if mask.shape != a.shape:
        raise ShapeError(_shapes("dropout-mask-mul", a, mask))
    return a * mask


def _dropout_bwd(g, out, a, mask):
    return (g * mask,)


def _softmax_fwd(a):
    e = np.exp(a - a.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _softmax_bwd(g, out, a):
    return (out * (g - (g * out).sum(axis=0, keepdims=True)),)


def _log_softmax_fwd(a):
    shifted = a - a.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def _log_softmax_bwd(g, out, a):
    return (g - np.exp(out) * g.sum(axis=0, keepdims=True),)


def _logsumexp_fwd(a):
    m = a.max(axis=0, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=0, keepdims=True))


def _logsumexp_bwd(g, out, a):
    return (g * np.exp(a - out),)


def _pick_index(a, index):
    cols = a.shape[1]
    if isinstance(index, (int, np.integer)):
        if not 0 <= index < a.shape[0]:
            raise IndexError(f"pick: index outside [0, {a.shape[0]})")
        return np.full(cols, index, dtype=np.intp)
    idx = np.broadcast_to(np.asarray(index, dtype=np.intp), (cols,))
    if idx.min() < 0 or idx.max() >= a.shape[0]:
        raise IndexError(f"pick: index outside [0, {a.shape[0]})")
    return idx


def _pick_fwd(a, index):
    idx = _pick_index(a, index)
    return a[idx, np.arange(a.shape[1])][None, :]


def _pick_bwd(g, out, a, index):
    idx = _pick_index(a, index)
    full = np.zeros_like(a)
    full[idx, np.arange(a.shape[1])] = g[0]
    return (full,)


def _pick_log_prob_fwd(a, index):
    return _pick_fwd(_log_softmax_fwd(a), index)


def _pick_log_prob_bwd(g, out, a, index):
    idx = _pick_index(a, index)
    probs = _softmax_fwd(a)
    onehot = np.zeros_like(a)
    onehot[idx, np.arange(a.shape[1])] = 1.0
    return ((onehot - probs) * g,)


def _sum_fwd(a):
    return np.array([[a.sum()]], dtype=a.dtype)


def _sum_bwd(g, out, a):
    return (np.full_like(a, g[0, 0]),)


PRIMITIVES: dict[str, Primitive] = {
    "matmul": Primitive(_matmul_fwd, _matmul_bwd),
    "add": Primitive(_add_fwd, _add_bwd),
    "sub": Primitive(_sub_fwd, _sub_bwd),
    "mul": Primitive(_mul_fwd, _mul_bwd),
    "scale": Primitive(_scale_fwd, _scale_bwd),
    "tanh": Primitive(_tanh_fwd, _tanh_bwd),
    "sigmoid": Primitive(_sigmoid_fwd, _sigmoid_bwd),
    "lstm-cell": Primitive(_lstm_cell_fwd, _lstm_cell_bwd),
    "concat": Primitive(_concat_fwd, _concat_bwd),
    "rows": Primitive(_rows_fwd, _rows_bwd),
    "columns": Primitive(_columns_fwd, _columns_bwd),
    "lookup": Primitive(_lookup_fwd, _lookup_bwd),
    "dropout-mask-mul": Primitive(_dropout_fwd, _dropout_bwd),
    "softmax": Primitive(_softmax_fwd, _softmax_bwd),
    "log-softmax": Primitive(_log_softmax_fwd, _log_softmax_bwd),
    "logsumexp": Primitive(_logsumexp_fwd, _logsumexp_bwd),
    "pick": Primitive(_pick_fwd, _pick_bwd),
    "pick-log-prob": Primitive(_pick_log_prob_fwd, _pick_log_prob_bwd),
    "scalar-sum": Primitive(_sum_fwd, _sum_bwd),
}


class Tape:
    """Records one forward pass.

    With ``record=False`` nodes carry values only; this is the evaluation mode
    and :meth:`backward` is unavailable.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._swept = False

    def param(self, name: str, value: np.ndarray) -> Node:
        """Leaf for a trainable array; repeated requests share one node."""
        node = self.params.get(name)
        if node is None:
            node = Node(value, self, name=name)
            self.params[name] = node
            if self.record:
                self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        value = np.asarray(value, dtype=DTYPE)
        if value.ndim == 1:
            value = value[:, None]
        return Node(value, self, name=name)

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        if self._swept:
            raise RuntimeError("tape already swept; start a new tape")
        values = []
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: input {x!r} belongs to another tape")
            values.append(x.value)
        value = PRIMITIVES[op].forward(*values, **attrs)
        if not self.record:
            return Node(value, self, op)
        node = Node(value, self, op, inputs, attrs)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(node) into every node; return parameter grads.

        A tape can be swept exactly once.
        """
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if self._swept:
            raise RuntimeError("backward already run on this tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward: loss must be (1, 1), got {loss.shape}")
        self._swept = True
        loss.grad = np.ones((1, 1), dtype=DTYPE)
        for node in reversed(self.nodes):
            if node.op is None or node.grad is None:
                continue
            rule = PRIMITIVES[node.op]
            grads = rule.backward(
                node.grad, node.value, *(p.value for p in node.parents), **node.attrs
            )
            for parent, g in zip(node.parents, grads):
                if g is None or (parent.op is None and self.params.get(parent.name) is not parent):
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    parent.grad += g
        return {
            name: node.grad if node.grad is not None else np.zeros_like(node.value)
            for name, node in self.params.items()
        }


def apply_primitive(op: str, inputs: Sequence[Node], **attrs) -> Node:
    if not inputs:
        raise ValueError(f"{op}: no inputs")
    return inputs[0].tape.apply(op, *inputs, **attrs)


# thin wrappers so model code reads like algebra


def matmul(a, b):
    return a.tape.apply("matmul", a, b)


def add(a, b):
    return a.tape.apply("add", a, b)


def sub(a, b):
    return a.tape.apply("sub", a, b)


def mul(a, b):
    return a.tape.apply("mul", a, b)


def scale(a, factor: float):
    return a.tape.apply("scale", a, factor=float(factor))


def tanh(a):
    return a.tape.apply("tanh", a)


def sigmoid(a):
    return a.tape.apply("sigmoid", a)


def lstm_cell(x_gates, rec_gates, prev):
    """Fused LSTM update on stacked states: [h; c_mem] (2H x 1) in and out."""
    return prev.tape.apply("lstm-cell", x_gates, rec_gates, prev)


def concat(nodes: Sequence[Node], axis: int = 0):
    if len(nodes) == 1:
        return nodes[0]
    return nodes[0].tape.apply("concat", *nodes, axis=axis)


def rows(a, start: int, stop: int):
    return a.tape.apply("rows", a, start=start, stop=stop)


def column(a, index: int):
    return a.tape.apply("columns", a, start=index, stop=index + 1)


def columns(a, start: int, stop: int):
    return a.tape.apply("columns", a, start=start, stop=stop)


def lookup(table, ids):
    return table.tape.apply("lookup", table, ids=tuple(int(i) for i in ids))


def dropout(a, mask):
    if mask is None:
        return a
    return a.tape.apply("dropout-mask-mul", a, mask=mask)


def softmax(a):
    return a.tape.apply("softmax", a)


def log_softmax(a):
    return a.tape.apply("log-softmax", a)


def logsumexp(a):
    return a.tape.apply("logsumexp", a)


def pick(a, index):
    return a.tape.apply("pick", a, index=index)


def pick_log_prob(logits, index):
    return logits.tape.apply("pick-log-prob", logits, index=index)


def total(a):
    return a.tape.apply("scalar-sum", a)


# -- finite differences --------------------------------------------------------


class NondeterministicLoss(RuntimeError):
    pass


def _evaluate(loss_fn):
    return loss_fn(Tape(record=False)).value[0, 0]


# fourth-order central stencil: offsets and weights, divided by 12 * step
_STENCIL = ((2, -1.0), (1, 8.0), (-1, -8.0), (-2, 1.0))


def numeric_gradient(
    loss_fn,
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    precision=np.longdouble,
):
    """Fourth-order central differences.

    The loss is re-evaluated with every array of ``params`` temporarily
    replaced by a ``precision`` copy; extended precision keeps round-off in
    the differences far below the gradients being checked.  ``params`` is
    restored on exit.
    """
    originals = dict(params)
    for name in originals:
        params[name] = originals[name].astype(precision)
    grads = {}
    try:
        for name, value in params.items():
            g = np.zeros(value.shape)
            flat = value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                acc = precision(0)
                for offset, weight in _STENCIL:
                    flat[i] = orig + offset * precision(step)
                    acc += weight * _evaluate(loss_fn)
                flat[i] = orig
                g.reshape(-1)[i] = acc / (12 * precision(step))
            grads[name] = g
    finally:
        params.update(originals)
    return grads


def gradient_errors(loss_fn, params: dict[str, np.ndarray], step: float = 1e-5):
    """Worst relative error per parameter array.

    ``loss_fn(tape)`` must build its graph from ``tape.param(name, params[name])``
    and be deterministic.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    first, second = _evaluate(loss_fn), _evaluate(loss_fn)
    if first != second:
        raise NondeterministicLoss(f"loss changed between evaluations: {first} vs {second}")
    tape = Tape()
    analytic = tape.backward(loss_fn(tape))
    numeric = numeric_gradient(loss_fn, params, step)
    errors = {}
    for name in params:
        a = analytic.get(name, np.zeros_like(params[name]))
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        errors[name] = float((np.abs(a - n) / denom).max()) if a.size else 0.0
    return errors


def finite_difference_check(loss_fn, params: dict[str, np.ndarray], step: float = 1e-5) -> float:
    """Max relative error ``|a - n| / max(|a|, |n|, 1e-8)`` between backprop
    and central-difference gradients."""
    return max(gradient_errors(loss_fn, params, step).values())
