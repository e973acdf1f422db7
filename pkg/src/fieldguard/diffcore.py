"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tape records every primitive application as a Node; backward() walks the
nodes in reverse construction order and accumulates vector-Jacobian products
into the tensors that were registered as parameters.  The tape is rebuilt on
every training step, so graph structure may freely depend on runtime data
(sample counts, batch sizes).

Everything is float64.  Broadcasting is deliberately restricted: two shapes
are compatible when they are equal, when one operand is a scalar, when the
smaller shape is a trailing suffix of the larger one, or when they have equal
rank and every mismatched axis is size 1 on one side.  Anything richer is
rejected rather than silently reshaped.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class DomainError(ValueError):
    """Raised when an input lies outside a primitive's documented domain."""


def _asarray(x):
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_broadcast(op, sa, sb):
    """Validate the restricted broadcast rule; return the result shape."""
    if sa == sb:
        return sa
    if len(sa) == 0 or len(sb) == 0:
        return sa if len(sb) == 0 else sb
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) < len(big):
        if big[len(big) - len(small):] == small:
            return big
        raise ShapeMismatchError(
            f"{op}: shapes {sa} and {sb} are not trailing-compatible")
    # equal rank: size-1 axes may broadcast
    out = []
    for da, db in zip(sa, sb):
        if da == db:
            out.append(da)
        elif da == 1:
            out.append(db)
        elif db == 1:
            out.append(da)
        else:
            raise ShapeMismatchError(
                f"{op}: shapes {sa} and {sb} differ on a non-unit axis")
    return tuple(out)


def _unbroadcast(grad, shape):
    """Reduce grad (shaped like the broadcast result) back to `shape`."""
    if grad.shape == shape:
        return grad
    # sum away leading axes introduced by broadcasting
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """One node on a tape: op kind, parent ids, forward value, lazy grad."""

    __slots__ = ("tape", "id", "op", "inputs", "value", "requires", "_ctx")

    def __init__(self, tape, op, inputs, value, requires, ctx=None):
        self.tape = tape
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires = requires
        self._ctx = ctx
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, self.tape.lift(other))

    def __radd__(self, other):
        return add(self.tape.lift(other), self)

    def __sub__(self, other):
        return sub(self, self.tape.lift(other))

    def __rsub__(self, other):
        return sub(self.tape.lift(other), self)

    def __mul__(self, other):
        return mul(self, self.tape.lift(other))

    def __rmul__(self, other):
        return mul(self.tape.lift(other), self)

    def __truediv__(self, other):
        return div(self, self.tape.lift(other))

    def __rtruediv__(self, other):
        return div(self.tape.lift(other), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, self.tape.lift(other))


class Tape:
    """Ordered list of nodes plus the set of ids marked trainable.

    Single-threaded per tape; separate tapes never share state.
    """

    def __init__(self):
        self.nodes = []
        self.param_ids = set()

    def constant(self, value):
        return Tensor(self, "const", (), _asarray(value), requires=False)

    def parameter(self, value):
        t = Tensor(self, "param", (), _asarray(value), requires=True)
        self.param_ids.add(t.id)
        return t

    def lift(self, x):
        return x if isinstance(x, Tensor) else self.constant(x)

    def release(self):
        """Break tensor<->tape reference cycles so a finished tape frees
        immediately by refcount; training loops call this every step to keep
        peak memory flat without waiting on the cycle collector."""
        for node in self.nodes:
            node.inputs = ()
            node._ctx = None
        self.nodes.clear()
        self.param_ids.clear()

    def backward(self, root):
        """Gradients of scalar `root` w.r.t. every registered parameter."""
        if root.tape is not self:
            raise ValueError("backward: root belongs to a different tape")
        if root.value.size != 1:
            raise ShapeMismatchError(
                f"backward: root must be scalar, got shape {root.shape}")
        grads = {root.id: np.ones_like(root.value)}
        param_grads = {}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or not node.requires:
                continue
            if node.op == "param":
                param_grads[node.id] = g
                continue
            if node.op == "const":
                continue
            for parent, pg in zip(node.inputs, _VJPS[node.op](node, g)):
                if pg is None or not parent.requires:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        out = {}
        for pid in self.param_ids:
            if pid <= root.id:
                node = self.nodes[pid]
                out[pid] = param_grads.get(pid, np.zeros_like(node.value))
        return out


def _make(op, inputs, value, ctx=None):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{op}: produced non-finite values")
    requires = any(t.requires for t in inputs)
    tape = inputs[0].tape
    return Tensor(tape, op, tuple(inputs), value, requires, ctx)


# -- elementwise binary ------------------------------------------------

def add(a, b):
    _check_broadcast("add", a.shape, b.shape)
    return _make("add", (a, b), a.value + b.value)


def sub(a, b):
    _check_broadcast("sub", a.shape, b.shape)
    return _make("sub", (a, b), a.value - b.value)


def mul(a, b):
    _check_broadcast("mul", a.shape, b.shape)
    return _make("mul", (a, b), a.value * b.value)


def div(a, b):
    _check_broadcast("div", a.shape, b.shape)
    if np.any(b.value == 0.0):
        raise DomainError("div: division by zero")
    return _make("div", (a, b), a.value / b.value)


# -- elementwise unary -------------------------------------------------

def negate(a):
    return _make("negate", (a,), -a.value)


def exp(a):
    return _make("exp", (a,), np.exp(a.value))


def log(a):
    if np.any(a.value <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _make("log", (a,), np.log(a.value))


def tanh(a):
    return _make("tanh", (a,), np.tanh(a.value))


def sigmoid(a):
    v = np.where(a.value >= 0,
                 1.0 / (1.0 + np.exp(-np.abs(a.value))),
                 np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))))
    return _make("sigmoid", (a,), v)


def relu(a):
    return _make("relu", (a,), np.maximum(a.value, 0.0))


# Flooring at zero (e.g. perturbed densities) is the same primitive.
clamp_min_zero = relu


def softplus(a):
    v = np.logaddexp(0.0, a.value)
    return _make("softplus", (a,), v)


def sin(a):
    return _make("sin", (a,), np.sin(a.value))


def cos(a):
    return _make("cos", (a,), np.cos(a.value))


def square(a):
    return _make("square", (a,), a.value * a.value)


# -- shape & structure -------------------------------------------------

def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatchError(
            f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    return _make("matmul", (a, b), a.value @ b.value)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeMismatchError(
            f"reshape: cannot view {a.shape} as {shape}")
    return _make("reshape", (a,), a.value.reshape(shape))


def broadcast_to(a, shape):
    shape = tuple(shape)
    _check_broadcast("broadcast", a.shape, shape)
    return _make("broadcast", (a,), np.broadcast_to(a.value, shape).copy())


def concat(tensors, axis=0):
    if not tensors:
        raise ShapeMismatchError("concat: empty input list")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(base):
            raise ShapeMismatchError(
                f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        for ax in range(len(base)):
            if ax != axis % len(base) and s[ax] != base[ax]:
                raise ShapeMismatchError(
                    f"concat: shapes {tensors[0].shape} and {t.shape} "
                    f"differ off axis {axis}")
    v = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.shape[axis % v.ndim] for t in tensors]
    return _make("concat", tuple(tensors), v, ctx=(axis, sizes))


def tsum(a, axis=None):
    return _make("sum", (a,), np.sum(a.value, axis=axis), ctx=axis)


def tmean(a, axis=None):
    return _make("mean", (a,), np.mean(a.value, axis=axis), ctx=axis)


def gather(a, indices):
    """Select rows of `a` (axis 0) by an integer index array."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeMismatchError("gather: indices must be integers")
    if np.any(idx < 0) or np.any(idx >= a.shape[0]):
        raise DomainError("gather: index out of range")
    return _make("gather", (a,), a.value[idx], ctx=idx)


def getcols(a, start, stop):
    """Contiguous column slice of a 2-D tensor."""
    if a.value.ndim != 2:
        raise ShapeMismatchError(f"getcols: expects 2-D, got {a.shape}")
    return _make("getcols", (a,), a.value[:, start:stop].copy(),
                 ctx=(start, stop))


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy; labels are integer class ids."""
    labels = np.asarray(labels)
    if logits.value.ndim != 2:
        raise ShapeMismatchError(
            f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"softmax_cross_entropy: labels shape {labels.shape} does not "
            f"match batch {logits.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise DomainError("softmax_cross_entropy: label out of range")
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(z.shape[0]), labels]
    return _make("softmax_xent", (logits,), np.mean(nll), ctx=labels)


# -- vector-Jacobian products ------------------------------------------

def _vjp_add(n, g):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_sub(n, g):
    a, b = n.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _vjp_mul(n, g):
    a, b = n.inputs
    return (_unbroadcast(g * b.value, a.shape),
            _unbroadcast(g * a.value, b.shape))


def _vjp_div(n, g):
    a, b = n.inputs
    return (_unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape))


def _vjp_matmul(n, g):
    a, b = n.inputs
    return g @ b.value.T, a.value.T @ g


def _vjp_sum(n, g):
    (a,) = n.inputs
    axis = n._ctx
    if axis is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _vjp_mean(n, g):
    (a,) = n.inputs
    axis = n._ctx
    if axis is None:
        return (np.broadcast_to(g / a.value.size, a.shape).copy(),)
    scale = a.shape[axis]
    return (np.broadcast_to(np.expand_dims(g / scale, axis), a.shape).copy(),)


def _vjp_concat(n, g):
    axis, sizes = n._ctx
    outs = []
    offset = 0
    for size in sizes:
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(offset, offset + size)
        outs.append(g[tuple(sl)])
        offset += size
    return tuple(outs)


def _vjp_gather(n, g):
    (a,) = n.inputs
    out = np.zeros_like(a.value)
    np.add.at(out, n._ctx, g)
    return (out,)


def _vjp_getcols(n, g):
    (a,) = n.inputs
    start, stop = n._ctx
    out = np.zeros_like(a.value)
    out[:, start:stop] = g
    return (out,)


def _vjp_softmax_xent(n, g):
    (logits,) = n.inputs
    labels = n._ctx
    z = logits.value
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(z.shape[0]), labels] -= 1.0
    return (g * p / z.shape[0],)


_VJPS = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "negate": lambda n, g: (-g,),
    "exp": lambda n, g: (g * n.value,),
    "log": lambda n, g: (g / n.inputs[0].value,),
    "tanh": lambda n, g: (g * (1.0 - n.value * n.value),),
    "sigmoid": lambda n, g: (g * n.value * (1.0 - n.value),),
    "relu": lambda n, g: (g * (n.inputs[0].value > 0),),
    "softplus": lambda n, g: (g / (1.0 + np.exp(-n.inputs[0].value)),),
    "sin": lambda n, g: (g * np.cos(n.inputs[0].value),),
    "cos": lambda n, g: (-g * np.sin(n.inputs[0].value),),
    "square": lambda n, g: (2.0 * g * n.inputs[0].value,),
    "matmul": _vjp_matmul,
    "reshape": lambda n, g: (g.reshape(n.inputs[0].shape),),
    "broadcast": lambda n, g: (_unbroadcast(g, n.inputs[0].shape),),
    "concat": _vjp_concat,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "gather": _vjp_gather,
    "getcols": _vjp_getcols,
    "softmax_xent": _vjp_softmax_xent,
}


# -- gradient oracle ---------------------------------------------------

def finite_difference_check(build, params, h=1e-4):
    """Max relative error of analytic gradients vs central differences.

    `build(tape, tensors)` must construct a scalar output from the given
    parameter tensors.  Non-deterministic closures (two forward passes that
    disagree bitwise) are rejected.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    params = [_asarray(p) for p in params]

    def run(values):
        tape = Tape()
        tensors = [tape.parameter(v) for v in values]
        out = build(tape, tensors)
        return tape, tensors, out

    tape, tensors, out = run(params)
    tape2, _, out2 = run(params)
    if not np.array_equal(out.value, out2.value):
        raise ValueError("finite_difference_check: closure is "
                         "non-deterministic")
    grads = tape.backward(out)
    max_err = 0.0
    for k, p in enumerate(params):
        analytic = grads[tensors[k].id]
        flat = p.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = run(params)[2].value.item()
            flat[i] = orig - h
            fm = run(params)[2].value.item()
            flat[i] = orig
            central = (fp - fm) / (2.0 * h)
            err = abs(analytic.ravel()[i] - central) / max(abs(central), 1e-8)
            max_err = max(max_err, err)
    return max_err
