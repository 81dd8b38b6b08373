"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive is evaluated eagerly when recorded; the tape keeps the
forward values needed by the backward rules. Node ids are plain ints that
index ``Tape.nodes``.

Binary elementwise primitives accept operands of equal shape, or one operand
of shape ``()`` that is broadcast. No other broadcasting is performed.

Example
-------
>>> tape = Tape()
>>> x = tape.param("x", np.array([[3.0, 4.0]]))
>>> loss = tape.fro_norm(x)
>>> backward(tape, loss)["x"]
array([[0.6, 0.8]])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import KinkProximity, NonFiniteValue, NonScalarLoss, ShapeMismatch

FRO_EPS = 1e-12


@dataclass
class Node:
    kind: str
    inputs: tuple
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    requires_grad: bool = False


class Primitive(NamedTuple):
    forward: Callable
    backward: Callable
    # returns the input values closest to a non-differentiable point
    kink_inputs: Callable | None = None


def _same_or_scalar(a, b, kind):
    if a.shape != b.shape and a.ndim and b.ndim:
        raise ShapeMismatch(f"{kind}: shapes {a.shape} and {b.shape}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _binary(fn, kind):
    def forward(a, b):
        _same_or_scalar(a, b, kind)
        return fn(a, b)

    return forward


# -- primitive rules --------------------------------------------------------
# forward(*input_values, **attrs) -> value
# backward(g, out, *input_values, **attrs) -> tuple of grads (None = no grad)

def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _matmul_bwd(g, out, a, b):
    return g @ b.T, a.T @ g


def _add_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_bwd(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_bwd(g, out, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _transpose_fwd(a):
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return a.T.copy()


def _abs_bwd(g, out, a):
    return (g * np.sign(a),)


def _relu_bwd(g, out, a):
    return (g * (a > 0),)


def _elu_fwd(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_bwd(g, out, a):
    return (g * np.where(a > 0, 1.0, out + 1.0),)


def _softmax_fwd(a):
    if a.ndim != 2:
        raise ShapeMismatch(f"row softmax expects a matrix, got {a.shape}")
    z = np.exp(a - a.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _softmax_bwd(g, out, a):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


def _sum_fwd(a, axis=None):
    if axis is None:
        return np.asarray(a.sum())
    return a.sum(axis=axis, keepdims=True)


def _sum_bwd(g, out, a, axis=None):
    return (np.broadcast_to(g, a.shape).copy(),)


def _trace_fwd(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"trace expects a square matrix, got {a.shape}")
    return np.asarray(np.trace(a))


def _trace_bwd(g, out, a):
    return (g * np.eye(a.shape[0]),)


def _fro_fwd(a):
    return np.asarray(np.sqrt(np.sum(a * a)))


def _fro_bwd(g, out, a):
    if out < FRO_EPS:
        return (np.zeros_like(a),)
    return (g * a / out,)


def _spmm_fwd(a, matrix=None):
    if a.ndim != 2 or matrix.shape[1] != a.shape[0]:
        raise ShapeMismatch(f"spmm: {matrix.shape} @ {a.shape}")
    return np.asarray(matrix @ a)


def _spmm_bwd(g, out, a, matrix=None):
    return (np.asarray(matrix.T @ g),)


def _gather_fwd(a, index=None):
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeMismatch(f"gather index out of range for {a.shape[0]} rows")
    return a[index]


def _gather_bwd(g, out, a, index=None):
    grad = np.zeros_like(a)
    np.add.at(grad, np.asarray(index, dtype=np.int64), g)
    return (grad,)


def _asym_abs_fwd(a, rho=1.0, exempt=None):
    return np.where(a >= 0, rho * a, -a)


def _asym_abs_bwd(g, out, a, rho=1.0, exempt=None):
    return (g * np.where(a >= 0, rho, -1.0),)


def _asym_kinks(a, rho=1.0, exempt=None):
    if exempt is None:
        return a
    return a[~exempt]


def _log_fwd(a):
    if np.any(a <= 0):
        raise NonFiniteValue("log of a non-positive value")
    return np.log(a)


def _xent_fwd(a, labels=None):
    """Mean negative log-likelihood of the row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ShapeMismatch(f"cross-entropy: logits {a.shape}, labels {labels.shape}")
    shifted = a - a.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(a.shape[0]), labels]
    return np.asarray(nll.mean())


def _xent_bwd(g, out, a, labels=None):
    p = _softmax_fwd(a)
    p[np.arange(a.shape[0]), np.asarray(labels, dtype=np.int64)] -= 1.0
    return (g * p / a.shape[0],)


def _identity_kinks(a, **_):
    return a


PRIMITIVES: dict[str, Primitive] = {
    "matmul": Primitive(_matmul_fwd, _matmul_bwd),
    "add": Primitive(_binary(np.add, "add"), _add_bwd),
    "sub": Primitive(_binary(np.subtract, "sub"), _sub_bwd),
    "mul": Primitive(_binary(np.multiply, "mul"), _mul_bwd),
    "div": Primitive(_binary(np.divide, "div"), _div_bwd),
    "scale": Primitive(lambda a, c=1.0: c * a, lambda g, out, a, c=1.0: (c * g,)),
    "div_const": Primitive(lambda a, c=1.0: a / c, lambda g, out, a, c=1.0: (g / c,)),
    "transpose": Primitive(_transpose_fwd, lambda g, out, a: (g.T.copy(),)),
    "abs": Primitive(np.abs, _abs_bwd, _identity_kinks),
    "relu": Primitive(lambda a: np.maximum(a, 0.0), _relu_bwd, _identity_kinks),
    "elu": Primitive(_elu_fwd, _elu_bwd),
    "softmax": Primitive(_softmax_fwd, _softmax_bwd),
    "sum": Primitive(_sum_fwd, _sum_bwd),
    "trace": Primitive(_trace_fwd, _trace_bwd),
    "fro_norm": Primitive(_fro_fwd, _fro_bwd),
    "spmm": Primitive(_spmm_fwd, _spmm_bwd),
    "gather": Primitive(_gather_fwd, _gather_bwd),
    "asym_abs": Primitive(_asym_abs_fwd, _asym_abs_bwd, _asym_kinks),
    "log": Primitive(_log_fwd, lambda g, out, a: (g / a,)),
    "softmax_xent": Primitive(_xent_fwd, _xent_bwd),
}


class Tape:
    """Append-only record of a forward computation.

    Leaves are created with :meth:`constant` (no gradient) or :meth:`param`
    (trainable, addressed by name). Every other node comes from
    :meth:`record` or one of the convenience wrappers.
    """

    def __init__(self, primitives: dict[str, Primitive] | None = None):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self.primitives = PRIMITIVES if primitives is None else primitives

    def __len__(self):
        return len(self.nodes)

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def _leaf(self, kind, value, requires_grad):
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteValue(f"non-finite {kind} leaf")
        self.nodes.append(Node(kind, (), value, {}, requires_grad))
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        return self._leaf("constant", value, False)

    def param(self, name: str, value) -> int:
        """Register a trainable leaf; returns the existing id if ``name`` is known."""
        if name in self.params:
            return self.params[name]
        node = self._leaf("param", value, True)
        self.nodes[node].attrs["name"] = name
        self.params[name] = node
        return node

    def record(self, kind: str, inputs, **attrs) -> int:
        prim = self.primitives[kind]
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{kind}: unknown input node {i}")
        values = [self.nodes[i].value for i in inputs]
        out = np.asarray(prim.forward(*values, **attrs), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteValue(f"{kind} produced a non-finite value")
        needs = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(kind, inputs, out, attrs, needs))
        return len(self.nodes) - 1

    # convenience wrappers
    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def add(self, a, b):
        return self.record("add", (a, b))

    def sub(self, a, b):
        return self.record("sub", (a, b))

    def mul(self, a, b):
        return self.record("mul", (a, b))

    def div(self, a, b):
        return self.record("div", (a, b))

    def scale(self, a, c):
        return self.record("scale", (a,), c=float(c))

    def div_const(self, a, c):
        return self.record("div_const", (a,), c=float(c))

    def transpose(self, a):
        return self.record("transpose", (a,))

    def abs(self, a):
        return self.record("abs", (a,))

    def relu(self, a):
        return self.record("relu", (a,))

    def elu(self, a):
        return self.record("elu", (a,))

    def softmax(self, a):
        return self.record("softmax", (a,))

    def sum(self, a, axis=None):
        return self.record("sum", (a,), axis=axis)

    def trace(self, a):
        return self.record("trace", (a,))

    def fro_norm(self, a):
        return self.record("fro_norm", (a,))

    def spmm(self, matrix, a):
        """``matrix @ a`` for a constant (sparse or dense) ``matrix``."""
        return self.record("spmm", (a,), matrix=matrix)

    def gather(self, a, index):
        return self.record("gather", (a,), index=np.asarray(index, dtype=np.int64))

    def asym_abs(self, a, rho, exempt=None):
        return self.record("asym_abs", (a,), rho=float(rho), exempt=exempt)

    def log(self, a):
        return self.record("log", (a,))

    def softmax_xent(self, logits, labels):
        return self.record("softmax_xent", (logits,), labels=np.atleast_1d(labels))

    def activation(self, a, name):
        if name in (None, "identity", "linear"):
            return a
        return self.record(name, (a,))


def backward(tape: Tape, loss: int, seed: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of the scalar node ``loss`` for every parameter on the tape.

    Parameters that do not influence ``loss`` get zero gradients.
    """
    out = tape.nodes[loss]
    if out.value.shape != ():
        raise NonScalarLoss(f"loss node has shape {out.value.shape}")
    grads: dict[int, np.ndarray] = {loss: np.asarray(float(seed))}
    for idx in range(loss, -1, -1):
        g = grads.pop(idx, None)
        node = tape.nodes[idx]
        if g is None or not node.inputs:
            if node.kind == "param" and g is not None:
                grads[idx] = g
            continue
        prim = tape.primitives[node.kind]
        in_values = [tape.nodes[i].value for i in node.inputs]
        in_grads = prim.backward(g, node.value, *in_values, **node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = np.asarray(gi, dtype=np.float64)
    result = {}
    for name, node in tape.params.items():
        g = grads.get(node)
        result[name] = np.zeros_like(tape.nodes[node].value) if g is None else g
    return result


def kink_distance(tape: Tape) -> float:
    """Smallest magnitude of any input to a non-smooth primitive on the tape."""
    best = np.inf
    for node in tape.nodes:
        prim = tape.primitives.get(node.kind)
        if prim is None or prim.kink_inputs is None:
            continue
        vals = prim.kink_inputs(tape.nodes[node.inputs[0]].value, **node.attrs)
        if np.size(vals):
            best = min(best, float(np.min(np.abs(vals))))
    return best


def grad_check(f, params: dict, h: float = 1e-5, primitives=None) -> float:
    """Max relative error between backward() and central differences.

    ``f(tape, ids)`` records a scalar function of the parameters, where
    ``ids`` maps each name in ``params`` to its node id, and returns the loss
    node. The error for an entry is
    ``|analytic - numeric| / max(1, |numeric|)``.

    Raises KinkProximity when any input to abs, relu or asymmetric-abs lies
    within ``10 * h`` of the origin at the evaluation point.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values):
        tape = Tape(primitives)
        ids = {k: tape.param(k, v) for k, v in values.items()}
        return tape, f(tape, ids)

    tape, loss = evaluate(params)
    dist = kink_distance(tape)
    if dist <= 10 * h:
        raise KinkProximity(f"non-smooth input at distance {dist:.3g} <= 10h")
    analytic = backward(tape, loss)

    worst = 0.0
    for name, base in params.items():
        for idx in np.ndindex(base.shape):
            shifted = dict(params)
            plus = base.copy()
            plus[idx] += h
            shifted[name] = plus
            t, l = evaluate(shifted)
            f_plus = float(t.value(l))
            minus = base.copy()
            minus[idx] -= h
            shifted[name] = minus
            t, l = evaluate(shifted)
            f_minus = float(t.value(l))
            numeric = (f_plus - f_minus) / (2 * h)
            err = abs(analytic[name][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
