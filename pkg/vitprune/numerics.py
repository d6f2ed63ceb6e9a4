"""
Numerics
========

Dense float64 primitives with paired forward and backward evaluation.  Every
primitive takes :class:`~vitprune.numerics.Var` operands (plain arrays are
wrapped as constants) and returns a new :class:`~vitprune.numerics.Var`.  When
any operand is being watched by a :class:`~vitprune.numerics.Tape`, the
application is recorded there together with everything its backward needs;
otherwise nothing is recorded and the primitive is a plain numpy evaluation.

    >>> from vitprune import numerics as nx
    >>> tape = nx.Tape()
    >>> w = tape.watch([[3.0]])
    >>> loss = nx.total(nx.mul(w, w))
    >>> tape.backward(loss)
    >>> w.grad
    array([[6.]])

.. autoclass:: vitprune.numerics.Var
    :members:

.. autoclass:: vitprune.numerics.Tape
    :members:

.. autofunction:: vitprune.numerics.grad_check

.. autoclass:: vitprune.numerics.GradReport
    :members:
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MaskError, ShapeError, VitPruneError

LARGE = 1e9
"""Sentinel added to masked softmax logits (``-LARGE``)."""

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

logger = logging.getLogger(__name__)


class Var:
    """
    A value flowing through the primitives.  `grad` is filled in by
    :func:`Tape.backward` for watched leaves and recorded intermediates.
    """
    __slots__ = ("value", "grad", "tape")

    def __init__(self, value, tape=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return "Var(shape={0}, watched={1})".format(
            self.value.shape, self.tape is not None)


class _Record:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """
    Ordered record of primitive applications.  :meth:`backward` replays the
    records in exact reverse order.
    """

    def __init__(self):
        self.records = []

    def watch(self, value):
        """
        Starts tracking a leaf value.  The array is copied.
        """
        return Var(np.array(value, dtype=np.float64, copy=True), tape=self)

    def ops(self):
        return [record.op for record in self.records]

    def __len__(self):
        return len(self.records)

    def backward(self, out, seed=None):
        """
        Accumulates d(out)/d(var) into `grad` of every recorded value.

        :Parameters:
            out : :class:`Var`
                The value to differentiate, usually a scalar loss.
            seed : `numpy.ndarray`
                (optional) upstream gradient, defaults to ones.
        """
        if out.tape is not self:
            raise VitPruneError("backward() called on a value from another tape")
        out.grad = np.ones_like(out.value) if seed is None \
            else np.asarray(seed, dtype=np.float64)
        for record in reversed(self.records):
            g = record.out.grad
            if g is None:
                continue
            grads = record.backward(g)
            for var, grad in zip(record.inputs, grads):
                if grad is None or var.tape is None:
                    continue
                var.grad = grad if var.grad is None else var.grad + grad


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _record(op, value, inputs, backward):
    tape = None
    for var in inputs:
        if var.tape is not None:
            tape = var.tape
            break
    out = Var(value, tape)
    if tape is not None:
        tape.records.append(_Record(op, out, inputs, backward))
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape)


def matmul(a, b):
    """
    Matrix product.  Backward: dA = dC·Bᵀ, dB = Aᵀ·dC.
    """
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or \
            a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    A, B = a.value, b.value

    def backward(g):
        return g @ B.T, A.T @ g

    return _record("matmul", A @ B, (a, b), backward)


def add(a, b):
    a, b = as_var(a), as_var(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", a.value + b.value, (a, b), backward)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record("sub", a.value - b.value, (a, b), backward)


def mul(a, b):
    """
    Elementwise product with numpy broadcasting.
    """
    a, b = as_var(a), as_var(b)
    _broadcast_shape("mul", a, b)
    A, B = a.value, b.value

    def backward(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _record("mul", A * B, (a, b), backward)


def scale(a, s):
    a = as_var(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return _record("scale", a.value * s, (a,), backward)


def transpose(a):
    a = as_var(a)

    def backward(g):
        return (g.T,)

    return _record("transpose", a.value.T, (a,), backward)


def cols(a, start, stop):
    """
    Column slice ``a[:, start:stop]``.
    """
    a = as_var(a)
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[:, start:stop] = g
        return (grad,)

    return _record("cols", a.value[:, start:stop], (a,), backward)


def concat_cols(parts):
    parts = tuple(as_var(p) for p in parts)
    widths = np.cumsum([p.shape[1] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, widths, axis=1))

    return _record("concat_cols",
                   np.concatenate([p.value for p in parts], axis=1),
                   parts, backward)


def concat_rows(parts):
    parts = tuple(as_var(p) for p in parts)
    heights = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, heights, axis=0))

    return _record("concat_rows",
                   np.concatenate([p.value for p in parts], axis=0),
                   parts, backward)


def take_rows(a, index):
    """
    Row gather ``a[index]``.
    """
    a = as_var(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _record("take_rows", a.value[index], (a,), backward)


def mean_rows(a):
    """
    Column-wise mean over rows, shape ``(1, cols)``.
    """
    a = as_var(a)
    n = a.shape[0]

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean_rows", a.value.mean(axis=0, keepdims=True), (a,),
                   backward)


def total(a):
    """
    Sum of every entry, as a 0-d value.
    """
    a = as_var(a)
    shape = a.shape

    def backward(g):
        return (np.full(shape, float(g)),)

    return _record("total", np.asarray(a.value.sum()), (a,), backward)


def mean(a):
    a = as_var(a)
    return scale(total(a), 1.0 / a.value.size)


def pick(m, index):
    """
    Gathers ``m[i, index[i]]`` for every row, shape ``(rows, 1)``.
    """
    m = as_var(m)
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(m.shape[0])
    shape = m.shape

    def backward(g):
        grad = np.zeros(shape)
        grad[rows, index] = g[:, 0]
        return (grad,)

    return _record("pick", m.value[rows, index][:, None], (m,), backward)


def straight_through(hard, soft):
    """
    Emits `hard` in the forward pass while routing the whole upstream
    gradient to `soft`.
    """
    soft = as_var(soft)
    hard = np.asarray(hard, dtype=np.float64).reshape(soft.shape)

    def backward(g):
        return (g,)

    return _record("straight_through", hard, (soft,), backward)


def softmax_rows(m, additive_mask=None):
    """
    Row-wise softmax, stabilized by row-max subtraction.

    :Parameters:
        m : :class:`Var`
            Logits.
        additive_mask : `numpy.ndarray`
            (optional) same shape as `m`, entries in ``{0, -LARGE}``.  Masked
            positions receive zero weight.  Every row must keep at least one
            unmasked position.
    """
    m = as_var(m)
    z = m.value
    if additive_mask is not None:
        mask = np.asarray(additive_mask, dtype=np.float64)
        if mask.shape != z.shape:
            raise ShapeError("softmax_rows", z.shape, mask.shape)
        if not np.all((mask == 0.0) | (mask == -LARGE)):
            raise MaskError("additive mask entries must be 0 or -{0:g}"
                            .format(LARGE))
        if np.any(np.all(mask != 0.0, axis=-1)):
            raise MaskError("softmax row has every key masked")
        z = z + mask
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", y, (m,), backward)


def log_softmax_rows(m):
    m = as_var(m)
    z = m.value - m.value.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax_rows", out, (m,), backward)


def layer_norm(x, gain, bias, eps=1e-6):
    """
    Per-row normalization to mean 0 and variance 1 followed by
    ``gain * xhat + bias``.
    """
    x, gain, bias = as_var(x), as_var(gain), as_var(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError("layer_norm", x.shape, gain.shape)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    G = gain.value

    def backward(g):
        dxhat = g * G
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) -
                    xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record("layer_norm", xhat * G + bias.value, (x, gain, bias),
                   backward)


def gelu(x):
    """
    Tanh-approximated GELU:
    ``0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))``.
    """
    x = as_var(x)
    X = x.value
    t = np.tanh(GELU_C * (X + GELU_A * X ** 3))

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * X * X)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * dt),)

    return _record("gelu", 0.5 * X * (1.0 + t), (x,), backward)


@dataclass
class GradReport:
    """
    Outcome of :func:`grad_check`.  `errors` maps each parameter name to its
    maximum relative error.
    """
    errors: dict
    threshold: float
    loss: float
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    def worst(self):
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=lambda k: self.errors[k])
        return name, self.errors[name]


def _evaluate(f, params, name, index, delta):
    values = {}
    for key, value in params.items():
        if key == name:
            value = np.array(value, dtype=np.float64, copy=True)
            value[index] += delta
        values[key] = Var(value)
    return float(f(values).value)


def grad_check(f, params, eps=1e-5, threshold=1e-4, floor=1e-3):
    """
    Compares the taped gradient of a scalar computation with central finite
    differences.

    :Parameters:
        f : `callable`
            Maps ``{name: Var}`` to a scalar :class:`Var`.  Must be
            deterministic (reseed any generator inside `f`).
        params : `dict`
            ``{name: numpy.ndarray}`` of parameters to check.
        eps : `float`
            Finite-difference step, within [1e-7, 1e-4].
        threshold : `float`
            Maximum accepted relative error.
        floor : `float`
            Lower bound on the relative-error denominator; gradients smaller
            than this are effectively compared absolutely.

    :Returns:
        A :class:`GradReport`.  A non-finite loss is reported as a failure of
        every parameter rather than raised.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4], got {0}".format(eps))
    tape = Tape()
    watched = {name: tape.watch(value) for name, value in params.items()}
    try:
        loss = f(watched)
        loss_value = float(loss.value)
    except (FloatingPointError, VitPruneError) as e:
        logger.warning("grad_check: loss evaluation failed: {0}".format(e))
        loss_value = float("nan")
    if not np.isfinite(loss_value):
        return GradReport({name: float("inf") for name in params}, threshold,
                          loss_value, failures=sorted(params))
    tape.backward(loss)

    errors = {}
    failures = []
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        analytic = watched[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        numeric = np.empty_like(base)
        for index in np.ndindex(base.shape):
            plus = _evaluate(f, params, name, index, eps)
            minus = _evaluate(f, params, name, index, -eps)
            numeric[index] = (plus - minus) / (2.0 * eps)
        if base.size == 0:
            errors[name] = 0.0
        elif not np.all(np.isfinite(numeric)):
            errors[name] = float("inf")
        else:
            denominator = np.maximum(
                np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            errors[name] = float(np.max(np.abs(analytic - numeric) /
                                        denominator))
        if not errors[name] < threshold:
            failures.append(name)
        logger.debug("grad_check {0}: {1:.3e}".format(name, errors[name]))

    return GradReport(errors, threshold, loss_value, failures=failures)
