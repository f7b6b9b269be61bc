"""Dense 2-D arithmetic on a reverse-mode gradient tape.

A value is a 64-bit ``numpy.ndarray`` with two axes (batch rows, feature
columns). Operations on :class:`Node` objects record themselves on the owning
:class:`Tape`; :meth:`Tape.backward` accumulates gradients in reverse
recording order, which is a valid reverse topological order because a node is
always recorded after its inputs.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

EPS_PROB = 1e-7


def as_matrix(x):
    """Coerce scalars/vectors to a float64 2-D array (vectors become columns)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


class Node:
    __slots__ = ("tape", "value", "parents", "backward_fn", "op", "requires_grad", "_grad", "name", "id")

    def __init__(self, tape, value, parents=(), backward_fn=None, op="leaf", requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self._grad = None
        self.name = name
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        """Accumulated gradient; zeros when no gradient reached this node."""
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, name={self.name!r})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, c):
        return div_const(self, c)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations. Single-threaded; one tape per step."""

    def __init__(self, frozen=None):
        self.nodes = []
        # stop-gradient outputs in creation order; ``frozen`` replays them
        self.stopped = []
        self.frozen = None if frozen is None else list(frozen)

    def leaf(self, value, name=None, requires_grad=True):
        return Node(self, as_matrix(value), requires_grad=requires_grad, name=name)

    def const(self, value):
        return Node(self, as_matrix(value), op="const")

    def record(self, value, parents, backward_fn, op):
        """Append a computed node. ``backward_fn(g)`` returns one gradient per parent (or None)."""
        requires = any(p.requires_grad for p in parents)
        return Node(self, value, parents, backward_fn if requires else None, op, requires)

    def backward(self, root):
        if root.value.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
        root._grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.id + 1]):
            if node._grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node._grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent._grad = g if parent._grad is None else parent._grad + g


def _lift(x, like):
    if isinstance(x, Node):
        return x
    return like.tape.const(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a, b, op):
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- arithmetic


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} dimension mismatch")
    av, bv = a.value, b.value
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add(a, b):
    if not isinstance(a, Node):
        a, b = b, a
    b = _lift(b, a)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return a.tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b):
    if not isinstance(a, Node):
        a = _lift(a, b)
    b = _lift(b, a)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return a.tape.record(
        a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b):
    if not isinstance(a, Node):
        a, b = b, a
    if np.isscalar(b):
        return scale(a, b)
    b = _lift(b, a)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def scale(a, c):
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,), "scale")


def div_const(a, c):
    c = float(c)
    return a.tape.record(a.value / c, (a,), lambda g: (g / c,), "div_const")


def transpose(a):
    return a.tape.record(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def square(a):
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def sqrt(a, eps=1e-12):
    """sqrt(a + eps); eps keeps the derivative finite at zero."""
    out = np.sqrt(a.value + eps)
    return a.tape.record(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def log(a):
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,), "log")


# ---------------------------------------------------------------- activations


def relu(a):
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.value
    # split by sign so neither branch overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return a.tape.record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax_rows(a):
    x = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return a.tape.record(s, (a,), back, "softmax")


def bce(p, y, eps=EPS_PROB):
    """Elementwise binary cross entropy of probabilities ``p`` against labels ``y``.

    ``p`` is clamped to ``[eps, 1 - eps]`` first; the clamp has zero slope
    outside that interval. ``y`` may be fractional (soft labels) and may be a
    Node, in which case it also receives a gradient.
    """
    y = _lift(y, p)
    _check_broadcast(p.value, y.value, "bce")
    pv, yv = p.value, y.value
    pc = np.clip(pv, eps, 1.0 - eps)
    inside = (pv >= eps) & (pv <= 1.0 - eps)
    lp, l1p = np.log(pc), np.log(1.0 - pc)
    out = -(yv * lp + (1.0 - yv) * l1p)

    def back(g):
        dp = (-(yv / pc) + (1.0 - yv) / (1.0 - pc)) * inside
        return _unbroadcast(g * dp, pv.shape), _unbroadcast(-g * (lp - l1p), yv.shape)

    return p.tape.record(out, (p, y), back, "bce")


# ---------------------------------------------------------------- structure


def concat_cols(parts):
    if not parts:
        raise ShapeError("concat_cols of an empty list")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return parts[0].tape.record(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back, "concat")


def concat_rows(parts):
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return parts[0].tape.record(np.concatenate([p.value for p in parts], axis=0), tuple(parts), back, "concat_rows")


def slice_cols(a, start, stop):
    width = a.shape[1]

    def back(g):
        full = np.zeros((g.shape[0], width))
        full[:, start:stop] = g
        return (full,)

    return a.tape.record(a.value[:, start:stop].copy(), (a,), back, "slice")


def take_rows(a, index):
    """Rows ``index`` of ``a`` (gradient scatters back, duplicates accumulate)."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def back(g):
        full = np.zeros((n, g.shape[1]))
        np.add.at(full, index, g)
        return (full,)

    return a.tape.record(a.value[index], (a,), back, "take_rows")


def mean_cols_stack(parts):
    """Elementwise mean of k same-shaped matrices."""
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"mean_cols_stack: shapes differ {sorted(shapes)}")
    k = len(parts)
    # anchored at the first part so identical inputs come back bitwise
    base = parts[0].value
    delta = np.zeros_like(base)
    for p in parts[1:]:
        delta = delta + (p.value - base)
    return parts[0].tape.record(base + delta / k, tuple(parts), lambda g: (g / k,) * k, "mean_stack")


def sum_all(a):
    shape = a.shape
    return a.tape.record(
        np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum"
    )


def exact_sum(a):
    """Correctly rounded sum (``math.fsum``): independent of summation order."""
    shape = a.shape
    return a.tape.record(
        np.array([[math.fsum(a.value.ravel())]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "fsum"
    )


def mean_all(a):
    n = a.value.size
    shape = a.shape
    return a.tape.record(
        np.array([[a.value.sum() / n]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean"
    )


def sum_cols(a):
    """Row-wise sum: B x F -> B x 1."""
    shape = a.shape
    return a.tape.record(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_cols")


def l2_sq(a):
    """Squared Frobenius norm as a 1 x 1 node."""
    av = a.value
    return a.tape.record(np.array([[np.sum(av * av)]]), (a,), lambda g: (2.0 * g[0, 0] * av,), "l2_sq")


def affine(x, W, b=None):
    out = matmul(x, W)
    return out if b is None else add(out, b)


def stop_gradient(a):
    """Pass the value through; nothing flows back to ``a``.

    On a tape built with ``frozen`` values the recorded value is replayed
    instead, which is how finite differences see a constant teacher.
    """
    tape = a.tape
    value = a.value
    if tape.frozen is not None:
        value = tape.frozen[len(tape.stopped)]
        if value.shape != a.value.shape:
            raise ShapeError("frozen stop-gradient replay out of step with the graph")
    tape.stopped.append(value)
    return Node(tape, value, (a,), None, "stop_gradient", False)


def clip_const(a, lo=None, hi=None):
    """Clamp values; zero slope where clamped."""
    v = np.clip(a.value, lo, hi)
    mask = v == a.value
    return a.tape.record(v, (a,), lambda g: (g * mask,), "clip")


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckResult:
    max_error: float
    per_param: dict = field(default_factory=dict)
    n_checked: int = 0

    def worst(self):
        return max(self.per_param.items(), key=lambda kv: kv[1]) if self.per_param else (None, 0.0)


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f, params, h=1e-5, max_entries=None, seed=0):
    """Compare tape gradients of ``f`` against central differences.

    ``f(tape, leaves)`` builds a scalar root node from a dict of leaf nodes
    keyed like ``params`` (a dict of float64 arrays, perturbed in place and
    restored). Stop-gradient outputs are frozen at their base-point values
    while probing, so the oracle differentiates the same surrogate as the
    tape. ``max_entries`` caps the entries probed per tensor (chosen
    with a seeded RNG, plus the largest analytic gradient); ``None``
    probes every entry. Returns the max over
    probed entries of ``|a - n| / max(|a|, |n|, 1e-8)``, plus per-tensor maxima.
    """
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    root = f(tape, leaves)
    tape.backward(root)
    analytic = {k: leaves[k].grad for k in params}

    def value_at():
        t = Tape(frozen=tape.stopped)
        return float(f(t, {k: t.leaf(v, name=k, requires_grad=False) for k, v in params.items()}).value[0, 0])

    rng = np.random.default_rng(seed)
    result = GradCheckResult(0.0)
    for name, arr in params.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        a_flat = analytic[name].reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            # sampled rows of a sparse table are mostly zero, so keep the largest gradient too
            idx = rng.choice(flat.size, size=max_entries, replace=False)
            idx = np.unique(np.append(idx, np.argmax(np.abs(a_flat))))
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = value_at()
            flat[i] = old - h
            fm = value_at()
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, float(relative_error(a_flat[i], num)))
        result.per_param[name] = worst
        result.n_checked += len(idx)
        result.max_error = max(result.max_error, worst)
    return result
