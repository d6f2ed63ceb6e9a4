"""
Losses
======

Training objectives.  The ratio losses steer how many tokens stay active at
each gated layer:

* :func:`dynamic_ratio_loss` compares the *batch* mean usage with the target,
  so individual images may keep more or fewer tokens;
* :func:`fixed_ratio_loss` pushes every image to the target on its own.

Both accept a batch given either as :class:`~vitprune.pruning_engine.MaskTrace`
objects (hard usages, for reporting) or as per-image sequences of per-layer
usages (floats or scalar :class:`~vitprune.numerics.Var`, for training).

.. autofunction:: vitprune.losses.task_loss

.. autofunction:: vitprune.losses.dynamic_ratio_loss

.. autofunction:: vitprune.losses.fixed_ratio_loss

.. autofunction:: vitprune.losses.total_loss

.. autoclass:: vitprune.losses.LossReport
    :members:
"""
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import LabelError, ShapeError


@dataclass(frozen=True)
class LossReport:
    """
    Scalars of one optimisation step (or an epoch average) and the hard
    per-layer token usage.
    """
    task: float
    ratio: float
    total: float
    usage: tuple

    @classmethod
    def from_vars(cls, task, ratio, total, usage):
        return cls(float(task.value), float(ratio.value), float(total.value),
                   tuple(float(u) for u in usage))

    def to_record(self):
        return {"task": self.task, "ratio": self.ratio, "total": self.total}


def task_loss(scores, labels):
    """
    Mean per-token cross-entropy with a stable log-softmax.

    :Parameters:
        scores : :class:`~vitprune.numerics.Var`
            N × K scores.
        labels : `numpy.ndarray`
            N class ids in [0, K).
    """
    scores = nx.as_var(scores)
    labels = np.asarray(labels)
    n, k = scores.shape
    if labels.shape != (n,):
        raise ShapeError("task_loss", scores.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError("labels must lie in [0, {0}), got [{1}, {2}]"
                         .format(k, labels.min(), labels.max()))
    picked = nx.pick(nx.log_softmax_rows(scores), labels.astype(np.intp))
    return nx.scale(nx.total(picked), -1.0 / n)


def _usage_rows(trace_batch):
    rows = []
    for item in trace_batch:
        if hasattr(item, "masks"):
            rows.append([float(u) for u in item.usage])
        else:
            rows.append(list(item))
    return rows


def _check(rows, targets):
    for row in rows:
        if len(row) != len(targets):
            raise ShapeError("ratio_loss", (len(row),), (len(targets),))


def _accumulate(total, term):
    return term if total is None else nx.add(total, term)


def dynamic_ratio_loss(trace_batch, targets):
    """
    ``(1/L)·Σ_l (mean over batch and tokens of M − t_l)²``.
    """
    rows = _usage_rows(trace_batch)
    _check(rows, targets)
    if not rows or not len(targets):
        return nx.Var(0.0)
    loss = None
    for layer, target in enumerate(targets):
        batch = None
        for row in rows:
            batch = _accumulate(batch, nx.as_var(row[layer]))
        diff = nx.sub(nx.scale(batch, 1.0 / len(rows)), target)
        loss = _accumulate(loss, nx.mul(diff, diff))
    return nx.scale(loss, 1.0 / len(targets))


def fixed_ratio_loss(trace_batch, targets):
    """
    ``(1/(L·B))·Σ_l Σ_b (per-image mean of M − t_l)²``.
    """
    rows = _usage_rows(trace_batch)
    _check(rows, targets)
    if not rows or not len(targets):
        return nx.Var(0.0)
    loss = None
    for layer, target in enumerate(targets):
        for row in rows:
            diff = nx.sub(nx.scale(nx.as_var(row[layer]), 1.0), target)
            loss = _accumulate(loss, nx.mul(diff, diff))
    return nx.scale(loss, 1.0 / (len(targets) * len(rows)))


def ratio_loss(rate_mode, trace_batch, targets):
    if rate_mode == "dynamic":
        return dynamic_ratio_loss(trace_batch, targets)
    elif rate_mode == "fixed":
        return fixed_ratio_loss(trace_batch, targets)
    raise ValueError("unknown rate mode {0!r}".format(rate_mode))


def total_loss(task, ratio, loss_lambda):
    """
    ``task + λ·ratio``.
    """
    if loss_lambda < 0:
        raise ValueError("loss_lambda must be nonnegative")
    return nx.add(task, nx.scale(ratio, loss_lambda))
