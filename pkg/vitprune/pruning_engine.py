"""
Pruning engine
==============

Runs the gated backbone: picks a keep mask at every gated layer, applies the
preserve/remove and reactivate/restrict workflow switches, executes each
block in masked (training) or gathered (inference) form and hands the final
map to the prediction head.

.. autoclass:: vitprune.pruning_engine.PruneConfig
    :members:

.. autoclass:: vitprune.pruning_engine.MaskTrace
    :members:

.. autoclass:: vitprune.pruning_engine.BackboneOutput
    :members:

.. autofunction:: vitprune.pruning_engine.run_backbone

.. autofunction:: vitprune.pruning_engine.restrict_no_reactivation

.. autofunction:: vitprune.pruning_engine.zero_pad_removal

.. autofunction:: vitprune.pruning_engine.flop_count
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, NonFiniteError, ShapeError, VitPruneError
from .gating import (attention_score_select, gate_logits, sample_mask_train,
                     select_mask_infer)
from .vit import (GATHERED, MASKED, class_token_attention, head_predict,
                  patch_embed, vit_block_forward)

GATE_MLP = "gate_mlp"
ATTENTION_SCORE = "attention_score"
SELECTORS = (GATE_MLP, ATTENTION_SCORE)
GATE_DESIGNS = ("mlp2", "dynamicvit")
DYNAMIC = "dynamic"
FIXED = "fixed"
RATE_MODES = (DYNAMIC, FIXED)
TRAIN = "train"
INFER = "infer"

DEFAULT_GATED_LAYERS = (4, 5, 6, 7, 8, 9, 10, 11, 12)
DEFAULT_KEEP_RATIOS = (0.7, 0.7, 0.7, 0.49, 0.49, 0.49, 0.343, 0.343, 0.343)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneConfig:
    """
    Workflow switches and keep-ratio schedule.

    :Parameters:
        selector : `str`
            "gate_mlp" (learned gate) or "attention_score" (class token).
        gate_design : `str`
            "mlp2" or "dynamicvit"; applies to the gate selector.
        rate_mode : `str`
            "dynamic" (batch-averaged ratio loss) or "fixed" (per image).
        preserve : `bool`
            Keep pruned tokens in the map handed to the head.  When False,
            masks are cumulative and the head reads a zero-padded map.
        reactivate : `bool`
            Allow a pruned token to be selected again later.
        gated_layers : `tuple`
            Strictly increasing 1-based layer indices.
        keep_ratios : `tuple`
            Target keep ratio per gated layer, in (0, 1].
        loss_lambda : `float`
            Weight of the ratio loss.
        tau : `float`
            Gumbel-Softmax temperature.
        straight_through : `bool`
            Hard masks forward during training.  False runs the relaxed
            masks forward, which gradient checks rely on.
    """
    selector: str = GATE_MLP
    gate_design: str = "mlp2"
    rate_mode: str = DYNAMIC
    preserve: bool = True
    reactivate: bool = True
    gated_layers: tuple = DEFAULT_GATED_LAYERS
    keep_ratios: tuple = DEFAULT_KEEP_RATIOS
    loss_lambda: float = 4.0
    tau: float = 1.0
    straight_through: bool = True

    @classmethod
    def dense(cls):
        return cls(gated_layers=(), keep_ratios=())

    @property
    def restricted(self):
        return not self.reactivate or not self.preserve

    def target(self, layer):
        return self.keep_ratios[self.gated_layers.index(layer)]

    def validate(self, dims=None, path="prune"):
        if self.selector not in SELECTORS:
            raise ConfigError.from_field(path, "selector", "one of {0}"
                                         .format(SELECTORS))
        if self.gate_design not in GATE_DESIGNS:
            raise ConfigError.from_field(path, "gate_design", "one of {0}"
                                         .format(GATE_DESIGNS))
        if self.rate_mode not in RATE_MODES:
            raise ConfigError.from_field(path, "rate_mode", "one of {0}"
                                         .format(RATE_MODES))
        if len(self.keep_ratios) != len(self.gated_layers):
            raise ConfigError.from_field(
                path, "keep_ratios", "needs one entry per gated layer ({0})"
                .format(len(self.gated_layers)))
        if any(not 0.0 < t <= 1.0 for t in self.keep_ratios):
            raise ConfigError.from_field(path, "keep_ratios",
                                         "values must lie in (0, 1]")
        if any(b <= a for a, b in zip(self.gated_layers,
                                      self.gated_layers[1:])):
            raise ConfigError.from_field(path, "gated_layers",
                                         "must be strictly increasing")
        if self.gated_layers and (self.gated_layers[0] < 1 or (
                dims is not None and self.gated_layers[-1] > dims.layers)):
            raise ConfigError.from_field(path, "gated_layers",
                                         "must lie in [1, layers]")
        if self.loss_lambda < 0:
            raise ConfigError.from_field(path, "loss_lambda",
                                         "must be nonnegative")
        if self.tau <= 0:
            raise ConfigError.from_field(path, "tau", "must be positive")
        if not self.preserve and self.reactivate:
            raise ConfigError.from_field(
                path, "reactivate", "requires preserve (removed tokens "
                "cannot come back)")
        return self


@dataclass
class MaskTrace:
    """
    Hard keep masks, one row per gated layer.  Non-gated layers are
    implicitly all-ones.
    """
    gated_layers: tuple
    masks: np.ndarray

    @classmethod
    def empty(cls, n_tokens):
        return cls((), np.zeros((0, n_tokens), dtype=bool))

    @property
    def n_tokens(self):
        return self.masks.shape[1]

    @property
    def keep_counts(self):
        return self.masks.sum(axis=1)

    @property
    def usage(self):
        return self.masks.mean(axis=1)

    def cumulative(self):
        """
        Tokens active at every gated layer.
        """
        return self.masks.all(axis=0)

    def is_nested(self):
        return bool(np.all(self.masks[1:] <= self.masks[:-1]))


@dataclass
class BackboneOutput:
    """
    Result of :func:`run_backbone`.

    `features` is the final preserved token map; `head_input` is what the
    head actually read (zero-padded under the removal baseline).
    `usages` holds one scalar per gated layer: the relaxed mean keep value
    in training, the hard mean otherwise.  `layer_inputs` is filled only
    when requested.
    """
    features: nx.Var
    head_input: nx.Var
    scores: nx.Var
    trace: MaskTrace
    usages: list
    keep_probs: list
    flops: int
    layer_seconds: list
    seconds: float
    layer_inputs: list = field(default_factory=list)


def restrict_no_reactivation(m_l, m_prev):
    """
    Elementwise product of a mask with its predecessor, so the active set
    can only shrink.
    """
    m_l = np.asarray(m_l, dtype=bool)
    m_prev = np.asarray(m_prev, dtype=bool)
    if m_l.shape != m_prev.shape:
        raise ShapeError("restrict_no_reactivation", m_l.shape, m_prev.shape)
    return m_l & m_prev


def zero_pad_removal(x, cumulative_keep):
    """
    Removal baseline: rows of removed tokens become zeros, kept rows pass
    through.
    """
    keep = np.asarray(cumulative_keep, dtype=np.float64)
    if keep.shape != (x.shape[0],):
        raise ShapeError("zero_pad_removal", x.shape, keep.shape)
    return nx.mul(x, keep[:, None])


def block_flops(k, width):
    """
    Multiply-accumulates of one block over `k` tokens: QKV/O projections
    4kC², attention products 2k²C, MLP 8kC².
    """
    return 4 * k * width * width + 2 * k * k * width + 8 * k * width * width


def selector_flops(cfg, n, width, design="mlp2"):
    if cfg.selector == ATTENTION_SCORE:
        # key projection of every token plus one score per token
        return (n + 1) * width * width + (n + 1) * width
    cost = (n * width * width + n * width) // 2
    if design == "dynamicvit":
        cost += n * width * width
    return cost


def flop_count(cfg, trace, dims):
    """
    Analytic cost of one backbone pass.  Gated layers are charged at their
    active token count plus the selector; other layers at N.  The class
    token of the attention-score selector counts as one extra active token.

    :Returns:
        `int`
    """
    n, width = dims.n_tokens, dims.width
    extra = 1 if cfg.selector == ATTENTION_SCORE else 0
    counts = dict(zip(trace.gated_layers, (int(c) for c in trace.keep_counts)))
    total = 0
    for layer in range(1, dims.layers + 1):
        if layer in counts:
            total += block_flops(counts[layer] + extra, width)
            total += selector_flops(cfg, n, width, cfg.gate_design)
        else:
            total += block_flops(n + extra, width)
    return total


def _fallback(keep, p_keep, allowed):
    candidates = np.flatnonzero(allowed)
    best = candidates[np.argmax(p_keep[candidates])]
    keep = keep.copy()
    keep[best] = True
    logger.warning("empty mask, force-keeping token {0}".format(best))
    return keep


def run_backbone(image, params, cfg, rng=None, mode=INFER, variables=None,
                 masks=None, record_inputs=False):
    """
    Full gated forward pass over one image.

    :Parameters:
        image : `numpy.ndarray`
            H × W × ch image.
        params : :class:`~vitprune.params.BackboneParams`
        cfg : :class:`PruneConfig`
        rng : `numpy.random.Generator`
            Gumbel stream; required for training with the gate selector.
        mode : `str`
            "train" runs masked blocks with sampled masks; "infer" runs
            gathered blocks with argmax (or top-k) masks.
        variables : `dict`
            (train) ``{name: Var}`` to use instead of constants, e.g. the
            result of ``params.variables(tape)``.
        masks : `numpy.ndarray`
            (optional) L_g × N hard masks to inject instead of selecting.
            Workflow switches and the empty-mask fallback still apply.
        record_inputs : `bool`
            Keep a copy of the map entering every layer.

    :Returns:
        :class:`BackboneOutput`
    """
    started = time.perf_counter()
    dims = params.dims
    if mode == INFER:
        if variables is not None and any(v.tape is not None
                                         for v in variables.values()):
            raise VitPruneError("infer mode cannot record gradients")
        p = variables if variables is not None else params.variables()
        block_mode = GATHERED
    elif mode == TRAIN:
        p = variables if variables is not None else params.variables()
        block_mode = MASKED
        if rng is None and masks is None and cfg.gated_layers and \
                cfg.selector == GATE_MLP:
            raise ValueError("train mode needs an rng for Gumbel sampling")
    else:
        raise ValueError("unknown mode {0!r}".format(mode))
    if masks is not None:
        masks = np.asarray(masks, dtype=bool)
        if masks.shape[0] != len(cfg.gated_layers):
            raise ShapeError("run_backbone", masks.shape,
                             (len(cfg.gated_layers), dims.n_tokens))

    x = patch_embed(image, p, dims)
    n = x.shape[0]
    use_cls = cfg.selector == ATTENTION_SCORE
    if use_cls:
        x = nx.concat_rows([p["cls"], x])

    prev_keep = np.ones(n, dtype=bool)
    prev_value = None
    rows, usages, keep_probs, layer_seconds, layer_inputs = [], [], [], [], []
    for layer in range(1, dims.layers + 1):
        layer_started = time.perf_counter()
        gated = layer in cfg.gated_layers
        tokens = x
        if use_cls and (record_inputs or (gated and cfg.selector == GATE_MLP)):
            tokens = nx.take_rows(x, np.arange(1, n + 1))
        if record_inputs:
            layer_inputs.append(tokens.value.copy())
        value = None
        if gated:
            j = cfg.gated_layers.index(layer)
            keep, value, soft, p_keep = _select(
                tokens, x, p, cfg, dims, layer, mode, rng, prev_keep,
                None if masks is None else masks[j])
            if cfg.restricted:
                keep = restrict_no_reactivation(keep, prev_keep)
                if value is not None and prev_value is not None:
                    value = nx.mul(value, prev_value)
                    soft = nx.mul(soft, prev_value)
            if not keep.any():
                keep = _fallback(keep, p_keep,
                                 prev_keep if cfg.restricted else
                                 np.ones(n, dtype=bool))
                if value is not None:
                    value = nx.straight_through(keep, value)
            rows.append(keep)
            keep_probs.append(p_keep)
            usages.append(nx.mean(soft) if soft is not None
                          else float(keep.mean()))
            prev_keep = keep
            prev_value = value
        else:
            keep = np.ones(n, dtype=bool)

        if use_cls:
            keep = np.concatenate([[True], keep])
            if value is not None:
                value = nx.concat_rows([np.ones((1, 1)), value])
        x = vit_block_forward(x, keep, p, layer, dims, mode=block_mode,
                              mask=value)
        if not np.all(np.isfinite(x.value)):
            raise NonFiniteError(layer)
        layer_seconds.append(time.perf_counter() - layer_started)

    features = nx.take_rows(x, np.arange(1, n + 1)) if use_cls else x
    if rows:
        trace = MaskTrace(tuple(cfg.gated_layers), np.array(rows))
    else:
        trace = MaskTrace.empty(n)
    head_input = features if cfg.preserve else \
        zero_pad_removal(features, trace.cumulative())
    scores = head_predict(head_input, p)
    return BackboneOutput(
        features=features, head_input=head_input, scores=scores, trace=trace,
        usages=usages, keep_probs=keep_probs,
        flops=flop_count(cfg, trace, dims), layer_seconds=layer_seconds,
        seconds=time.perf_counter() - started, layer_inputs=layer_inputs)


def _select(tokens, x, p, cfg, dims, layer, mode, rng, prev_keep, injected):
    """
    Keep decision for one gated layer: (keep, combine value, relaxed value,
    keep scores).  Value and relaxed value are None outside training.
    """
    if cfg.selector == ATTENTION_SCORE:
        attn = class_token_attention(x, p, layer, dims)
        if cfg.restricted:
            attn = np.where(prev_keep, attn, 0.0)
        keep = attention_score_select(attn, cfg.target(layer)) \
            if injected is None else injected.copy()
        return keep, None, None, attn

    probs = gate_logits(tokens, p, layer, keep=prev_keep)
    if injected is not None:
        keep = injected.copy()
        if mode == TRAIN:
            value = nx.Var(keep[:, None].astype(np.float64))
            return keep, value, value, probs.p_keep
        return keep, None, None, probs.p_keep
    if mode == TRAIN:
        sampled = sample_mask_train(probs, rng, cfg.tau,
                                    hard=cfg.straight_through)
        return sampled.keep, sampled.value, sampled.soft, probs.p_keep
    return select_mask_infer(probs), None, None, probs.p_keep
