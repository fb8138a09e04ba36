"""
Reverse-mode automatic differentiation for Silhouette Lab.

A Tape records every operation applied to its variables in execution order,
so the node list is already topologically sorted and backward is one reverse
sweep. Every primitive also accepts plain arrays: when none of its operands is
a Var it simply returns the numpy result, which lets geometry, rendering and
loss code run unchanged on constants and on tape variables.

All values on the differentiable path are float64.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

import settings
from errors import DomainError, InvalidArgumentError, NumericalFailure

logger = logging.getLogger(__name__)


# ────────────── TAPE ──────────────

@dataclass
class _Node:
    kind: str
    parents: tuple
    shape: tuple
    backward: object = None


class Tape:
    """Flat record of operations; one tape per worker."""

    def __init__(self, debug=None):
        self.nodes = []
        self.debug = settings.DEBUG if debug is None else debug

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value):
        """Register an input variable (something to differentiate with respect to)."""
        return self._record(np.array(value, dtype=np.float64), (), None, "leaf")

    def _record(self, value, operands, backward, kind):
        value = np.asarray(value, dtype=np.float64)
        if self.debug and not np.all(np.isfinite(value)):
            raise NumericalFailure(f"non-finite value produced by '{kind}' (node {len(self.nodes)})")
        parents = tuple(op.index if isinstance(op, Var) else -1 for op in operands)
        self.nodes.append(_Node(kind, parents, value.shape, backward))
        return Var(self, len(self.nodes) - 1, value)


class Var:
    """A value living on a tape."""

    # ndarray op Var must defer to Var's reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self):
        return f"Var(node={self.index}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ────────────── HELPERS ──────────────

def is_var(x):
    return isinstance(x, Var)


def value(x):
    """Plain float64 array behind x (a Var or anything array-like)."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tape_of(*operands):
    tape = None
    for op in operands:
        if isinstance(op, Var):
            if tape is None:
                tape = op.tape
            elif op.tape is not tape:
                raise InvalidArgumentError("operands belong to different tapes")
    return tape


def _unbroadcast(grad, shape):
    """Sum grad down to shape after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(*arrays):
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError as exc:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise InvalidArgumentError(f"shape mismatch: {shapes}") from exc


def _expand(grad, shape, axis, keepdims):
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape).copy()


def accumulate_rows(index, values, rows):
    """Sum values into a (rows, ...) array grouped by a non-negative integer index.

    Same result as ``np.add.at(out, index, values)`` on a zero array, computed
    column by column with ``np.bincount``.
    """
    index = np.asarray(index, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    trailing = values.shape[index.ndim:]
    if index.size == 0:
        return np.zeros((rows,) + trailing)
    flat = values.reshape(index.size, -1)
    idx = index.reshape(-1)
    out = np.empty((rows, flat.shape[1]))
    for column in range(flat.shape[1]):
        out[:, column] = np.bincount(idx, weights=flat[:, column], minlength=rows)
    return out.reshape((rows,) + trailing)


# ────────────── ELEMENTWISE ARITHMETIC ──────────────

def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    _broadcast_check(av, bv)
    out = av + bv
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    _broadcast_check(av, bv)
    out = av - bv
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return tape._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    _broadcast_check(av, bv)
    out = av * bv
    if tape is None:
        return out
    return tape._record(
        out, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    _broadcast_check(av, bv)
    out = av / bv
    if tape is None:
        return out
    return tape._record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        "div",
    )


def neg(a):
    tape = _tape_of(a)
    out = -value(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    """a ** exponent for a constant exponent."""
    exponent = float(exponent)
    av = value(a)
    if not float(exponent).is_integer() and np.any(av < 0):
        raise DomainError(f"non-integer power {exponent} of a negative value")
    out = av ** exponent
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g * exponent * av ** (exponent - 1.0),), "power")


def sigmoid(a):
    av = value(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * av))
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    out = np.tanh(value(a))
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a):
    out = np.exp(value(a))
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    av = value(a)
    if np.any(av < 0):
        raise DomainError("log of a negative value")
    with np.errstate(divide="ignore"):
        out = np.log(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g / av,), "log")


def sqrt(a):
    av = value(a)
    if np.any(av < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    av = value(a)
    out = np.clip(av, lo, hi)
    tape = _tape_of(a)
    if tape is None:
        return out
    inside = (av >= lo) & (av <= hi)
    return tape._record(out, (a,), lambda g: (g * inside,), "clip")


def relu(a):
    av = value(a)
    out = np.maximum(av, 0.0)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g * (av > 0.0),), "relu")


def where(condition, a, b):
    """Elementwise select with a constant boolean condition."""
    cond = np.asarray(condition, dtype=bool)
    av, bv = value(a), value(b)
    _broadcast_check(cond, av, bv)
    out = np.where(cond, av, bv)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape._record(
        out, (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), av.shape),
                   _unbroadcast(np.where(cond, 0.0, g), bv.shape)),
        "where",
    )


# ────────────── LINEAR ALGEBRA & REDUCTIONS ──────────────

def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise InvalidArgumentError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def backward(g):
        a2 = av.reshape(1, -1) if av.ndim == 1 else av
        b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(av.shape), (a2.T @ g2).reshape(bv.shape)

    return tape._record(out, (a, b), backward, "matmul")


def sum(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (_expand(g, av.shape, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False):
    av = value(a)
    if av.size == 0:
        raise InvalidArgumentError("mean of an empty array")
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(av, axis=axis, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (_expand(g, av.shape, axis, keepdims) / count,), "mean")


def sqnorm(a, axis=-1):
    """Sum of squares along axis."""
    av = value(a)
    out = np.sum(av * av, axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (2.0 * av * np.expand_dims(g, axis),), "sqnorm")


def min_select(a, axis=-1):
    """
    Minimum along axis, selected by index.

    The whole gradient goes to the first minimiser (subgradient convention at ties).
    """
    av = value(a)
    idx = np.expand_dims(np.argmin(av, axis=axis), axis)
    out = np.take_along_axis(av, idx, axis=axis).squeeze(axis)
    tape = _tape_of(a)
    if tape is None:
        return out

    def backward(g):
        grad = np.zeros_like(av)
        np.put_along_axis(grad, idx, np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return tape._record(out, (a,), backward, "min_select")


def prod_complement(a, axis=-1):
    """
    Product-aggregate ∏(1 − x) along axis.

    The gradient for slot k is −∏_{i≠k}(1 − x_i), built from exclusive prefix
    and suffix products so zeros of (1 − x) are handled exactly.
    """
    av = value(a)
    comp = np.moveaxis(1.0 - av, axis, -1)
    out = np.prod(comp, axis=-1)
    tape = _tape_of(a)
    if tape is None:
        return out

    def backward(g):
        ones = np.ones(comp.shape[:-1] + (1,))
        prefix = np.concatenate([ones, np.cumprod(comp, axis=-1)[..., :-1]], axis=-1)
        suffix = np.concatenate(
            [np.cumprod(comp[..., ::-1], axis=-1)[..., :-1][..., ::-1], ones], axis=-1)
        grad = -prefix * suffix * g[..., None]
        return (np.moveaxis(grad, -1, axis),)

    return tape._record(out, (a,), backward, "prod_complement")


# ────────────── STRUCTURAL ──────────────

def getitem(a, key):
    av = value(a)
    out = av[key]
    tape = _tape_of(a)
    if tape is None:
        return out

    def backward(g):
        if _row_index(key):
            return (accumulate_rows(key, g, av.shape[0]),)
        grad = np.zeros_like(av)
        np.add.at(grad, key, g)
        return (grad,)

    return tape._record(out, (a,), backward, "getitem")


def _row_index(key):
    return (isinstance(key, np.ndarray) and key.dtype.kind in "iu"
            and (key.size == 0 or key.min() >= 0))


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape._record(out, (a,), lambda g: (g.reshape(av.shape),), "reshape")


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    tape = _tape_of(a)
    if tape is None:
        return out
    inverse = None if axes is None else tuple(np.argsort(axes))
    return tape._record(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(items, axis=0):
    values = [value(x) for x in items]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise InvalidArgumentError(f"concat shape mismatch: {[v.shape for v in values]}") from exc
    tape = _tape_of(*items)
    if tape is None:
        return out
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return tape._record(out, tuple(items), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(items, axis=0):
    values = [value(x) for x in items]
    try:
        out = np.stack(values, axis=axis)
    except ValueError as exc:
        raise InvalidArgumentError(f"stack shape mismatch: {[v.shape for v in values]}") from exc
    tape = _tape_of(*items)
    if tape is None:
        return out
    n = len(values)
    return tape._record(
        out, tuple(items),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
        "stack",
    )


def scatter_add(src, index, size):
    """out[index[i]] += src[i] for an output with `size` rows."""
    sv = value(src)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != sv.shape[0]:
        raise InvalidArgumentError(f"scatter_add index length {index.shape[0]} != rows {sv.shape[0]}")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise InvalidArgumentError(f"scatter_add index outside [0, {size})")
    out = accumulate_rows(index, sv, size)
    tape = _tape_of(src)
    if tape is None:
        return out
    return tape._record(out, (src,), lambda g: (g[index],), "scatter_add")


def custom(out, operands, backward, kind="custom"):
    """
    Record a fused kernel computed outside the tape.

    backward(g) must return one gradient (or None) per operand.
    """
    tape = _tape_of(*operands)
    if tape is None:
        return np.asarray(out, dtype=np.float64)
    return tape._record(out, tuple(operands), backward, kind)


# ────────────── BACKWARD ──────────────

class GradientMap:
    """∂root/∂node for every node reached by a backward sweep."""

    def __init__(self, grads, tape):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, var):
        grad = self._grads.get(var.index)
        if grad is None:
            return np.zeros(self._tape.nodes[var.index].shape)
        return grad

    def __contains__(self, var):
        return var.index in self._grads


def backward(root):
    """Accumulate gradients of a scalar root into every node it depends on."""
    if not isinstance(root, Var):
        raise InvalidArgumentError("backward needs a tape variable")
    if root.value.size != 1:
        raise InvalidArgumentError(f"backward root must be scalar, got shape {root.value.shape}")

    tape = root.tape
    grads = {root.index: np.ones_like(root.value)}
    for idx in range(root.index, -1, -1):
        grad = grads.get(idx)
        if grad is None:
            continue
        node = tape.nodes[idx]
        if node.backward is None:
            continue
        parent_grads = node.backward(grad)
        for parent, pgrad in zip(node.parents, parent_grads):
            if parent < 0 or pgrad is None:
                continue
            if tape.debug and not np.all(np.isfinite(pgrad)):
                raise NumericalFailure(f"non-finite gradient flowing out of '{node.kind}' (node {idx})")
            if parent in grads:
                grads[parent] = grads[parent] + pgrad
            else:
                grads[parent] = pgrad
    return GradientMap(grads, tape)


# ────────────── GRADIENT CHECK ──────────────

@dataclass
class GradcheckReport:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray = field(repr=False)
    max_rel_error: float
    tolerance: float
    passed: bool

    @property
    def worst_index(self):
        return int(np.argmax(self.rel_error)) if self.rel_error.size else -1


def gradcheck(function, point, step=1e-5, tolerance=1e-5, abs_floor=1e-8, name="function"):
    """
    Compare tape gradients against central finite differences.

    function maps an array (or a Var of the same shape) to a scalar. The
    relative error per coordinate is |a − n| / max(|a|, |n|, abs_floor).
    """
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    out = function(x)
    if not isinstance(out, Var):
        # function does not depend on its input at all
        analytic = np.zeros_like(point)
    else:
        analytic = backward(out)[x]

    numeric = np.zeros_like(point)
    flat = numeric.reshape(-1)
    for i in range(point.size):
        probe = point.copy().reshape(-1)
        probe[i] += step
        f_plus = float(np.asarray(value(function(probe.reshape(point.shape)))).reshape(()))
        probe[i] -= 2.0 * step
        f_minus = float(np.asarray(value(function(probe.reshape(point.shape)))).reshape(()))
        flat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    rel = (np.abs(analytic - numeric) / denom).reshape(-1)
    max_rel = float(rel.max()) if rel.size else 0.0
    passed = bool(max_rel <= tolerance)
    if not passed:
        logger.warning("gradcheck '%s' failed: max rel error %.3e > %.1e at coordinate %d",
                       name, max_rel, tolerance, int(np.argmax(rel)))
    return GradcheckReport(name, analytic, numeric, rel, max_rel, tolerance, passed)
