"""
Gating
======

Token-selection policies.  The default gate is a two-layer MLP
(C → C/4 → 2) whose softmax gives keep/prune probabilities per token.  During
training a hard keep mask is drawn with the Gumbel-Softmax trick and a
straight-through estimator; at inference the decision is the argmax.  The
DynamicViT-style gate and the class-token attention selector exist as
baselines.

.. autoclass:: vitprune.gating.GateProbs
    :members:

.. autofunction:: vitprune.gating.gate_logits

.. autofunction:: vitprune.gating.dynamicvit_gate_logits

.. autofunction:: vitprune.gating.sample_mask_train

.. autofunction:: vitprune.gating.select_mask_infer

.. autofunction:: vitprune.gating.attention_score_select
"""
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .vit import linear

KEEP = 0
PRUNE = 1


@dataclass
class GateProbs:
    """
    Keep/prune log-probabilities, N × 2.  Column 0 is keep.
    """
    log_probs: nx.Var

    @classmethod
    def from_probs(cls, p):
        with np.errstate(divide="ignore"):
            return cls(nx.Var(np.log(np.asarray(p, dtype=np.float64))))

    @property
    def p(self):
        return np.exp(self.log_probs.value)

    @property
    def p_keep(self):
        return self.p[:, KEEP]

    def __len__(self):
        return self.log_probs.shape[0]


@dataclass
class SampledMask:
    """
    A training-time mask: `keep` is the hard decision, `value` the N × 1
    value used in the combine (hard forward, soft backward when
    straight-through) and `soft` the relaxed keep probability.
    """
    keep: np.ndarray
    value: nx.Var
    soft: nx.Var


def gate_logits(x, p, layer, keep=None):
    """
    ``p = Softmax(MLP(x))`` for the gate attached to `layer`.  Dispatches to
    :func:`dynamicvit_gate_logits` when the layer carries that design.

    :Parameters:
        x : :class:`~vitprune.numerics.Var`
            N × C incoming tokens (before layer norm).
        p : `dict`
            Parameters.
        layer : `int`
        keep : `numpy.ndarray`
            (optional) currently active tokens; only the DynamicViT-style
            gate uses it.

    :Returns:
        :class:`GateProbs`
    """
    prefix = "gates.{0}".format(layer)
    if prefix + ".in.w" in p:
        return dynamicvit_gate_logits(x, p, layer, keep)
    hidden = nx.gelu(linear(x, p, prefix + ".fc1"))
    return GateProbs(nx.log_softmax_rows(linear(hidden, p, prefix + ".fc2")))


def dynamicvit_gate_logits(x, p, layer, keep=None):
    """
    Gate with a shared input projection split into a local half and a
    global half mean-pooled over the active tokens; the two are concatenated
    and fed to the same C → C/4 → 2 head.
    """
    prefix = "gates.{0}".format(layer)
    n, width = x.shape
    half = width // 2
    hidden = nx.gelu(linear(x, p, prefix + ".in"))
    local = nx.cols(hidden, 0, half)
    glob = nx.cols(hidden, half, width)
    if keep is not None and not np.all(keep):
        glob = nx.take_rows(glob, np.flatnonzero(keep))
    pooled = nx.add(np.zeros((n, width - half)), nx.mean_rows(glob))
    z = nx.concat_cols([local, pooled])
    hidden = nx.gelu(linear(z, p, prefix + ".fc1"))
    return GateProbs(nx.log_softmax_rows(linear(hidden, p, prefix + ".fc2")))


def gumbel_noise(rng, shape):
    u = np.maximum(rng.random(shape), np.finfo(np.float64).tiny)
    return -np.log(-np.log(u))


def sample_mask_train(probs, rng, tau=1.0, hard=True, noise=None):
    """
    Gumbel-Softmax sample of a keep mask.

    :Parameters:
        probs : :class:`GateProbs`
        rng : `numpy.random.Generator`
            Explicit stream; i.i.d. noise per token.
        tau : `float`
            Temperature, > 0.
        hard : `bool`
            Emit the hard 0/1 mask forward with the relaxed gradient
            (straight-through).  With False the relaxed value is emitted.
        noise : `numpy.ndarray`
            (optional) N × 2 Gumbel noise to use instead of drawing.

    :Returns:
        :class:`SampledMask`
    """
    if tau <= 0:
        raise ValueError("tau must be positive, got {0}".format(tau))
    if noise is None:
        noise = gumbel_noise(rng, probs.log_probs.shape)
    relaxed = nx.softmax_rows(
        nx.scale(nx.add(probs.log_probs, noise), 1.0 / tau))
    soft = nx.cols(relaxed, KEEP, KEEP + 1)
    keep = relaxed.value[:, KEEP] >= relaxed.value[:, PRUNE]
    value = nx.straight_through(keep, soft) if hard else soft
    return SampledMask(keep, value, soft)


def select_mask_infer(probs):
    """
    Deterministic inference decision: keep iff p_keep ≥ p_prune (ties keep).
    """
    log_probs = probs.log_probs.value
    return log_probs[:, KEEP] >= log_probs[:, PRUNE]


def n_selected(keep_ratio, n):
    # 1e-9 absorbs float noise such as 0.7 * 100 = 70.00000000000001
    return max(1, math.ceil(keep_ratio * n - 1e-9))


def attention_score_select(attn, keep_ratio):
    """
    Keeps the ⌈keep_ratio·N⌉ tokens with the highest class-token attention,
    ties broken towards the lower token index.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in (0, 1], got {0}"
                         .format(keep_ratio))
    if np.any(attn < 0):
        raise ValueError("attention scores must be nonnegative")
    k = n_selected(keep_ratio, attn.size)
    order = np.argsort(-attn, kind="stable")
    keep = np.zeros(attn.size, dtype=bool)
    keep[order[:k]] = True
    return keep
