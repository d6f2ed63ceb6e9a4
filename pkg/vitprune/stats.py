"""
Mask statistics
===============

Dataset-level summaries of :class:`~vitprune.pruning_engine.MaskTrace`
objects: token-usage heatmaps, reactivation ratios, the foreground/background
usage split and per-layer mask divergence.

.. autofunction:: vitprune.stats.token_usage_heatmap

.. autofunction:: vitprune.stats.reactivation_ratio

.. autofunction:: vitprune.stats.foreground_usage

.. autofunction:: vitprune.stats.mask_divergence
"""
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class Heatmap:
    """
    Per-image usage grids (integers) and their dataset average.
    """
    per_image: list
    average: np.ndarray


@dataclass(frozen=True)
class LayerReactivation:
    """
    Reactivation counts of one gated layer.  `ratio` is None when the layer
    pruned nothing; `immediate` is None when nothing pruned there came back.
    """
    layer: int
    pruned: int
    reactivated: int
    immediately: int

    @property
    def ratio(self):
        return self.reactivated / self.pruned if self.pruned else None

    @property
    def immediate(self):
        return self.immediately / self.reactivated if self.reactivated \
            else None


def token_usage(trace, n_layers):
    """
    Number of layers each token was active in: gated layers where its mask
    is 1 plus every non-gated layer.
    """
    n_gated = trace.masks.shape[0]
    return trace.masks.sum(axis=0).astype(np.int64) + (n_layers - n_gated)


def token_usage_heatmap(traces, grid, n_layers):
    """
    :Parameters:
        traces : `list`
            :class:`~vitprune.pruning_engine.MaskTrace` per image.
        grid : `tuple`
            (rows, cols) token grid; rows·cols must equal N.
        n_layers : `int`
            L, the backbone depth.

    :Returns:
        :class:`Heatmap`
    """
    rows, cols = grid
    per_image = []
    for trace in traces:
        if trace.n_tokens != rows * cols:
            raise ShapeError("token_usage_heatmap", (trace.n_tokens,),
                             (rows, cols))
        per_image.append(token_usage(trace, n_layers).reshape(rows, cols))
    if per_image:
        average = np.mean(np.stack(per_image).astype(np.float64), axis=0)
    else:
        average = np.zeros((rows, cols))
    return Heatmap(per_image, average)


def reactivation_ratio(traces):
    """
    Per gated layer, the share of tokens pruned there that are active again
    at some later gated layer, and the share of those reused at the very
    next gated layer.  Counts are pooled over `traces`.

    :Returns:
        `list` of :class:`LayerReactivation`
    """
    if not traces:
        return []
    layers = traces[0].gated_layers
    pruned = np.zeros(len(layers), dtype=np.int64)
    reactivated = np.zeros(len(layers), dtype=np.int64)
    immediately = np.zeros(len(layers), dtype=np.int64)
    for trace in traces:
        masks = trace.masks.astype(bool)
        # later[i]: active at some gated layer after i
        later = np.zeros_like(masks)
        for i in range(len(layers) - 2, -1, -1):
            later[i] = later[i + 1] | masks[i + 1]
        off = ~masks
        pruned += off.sum(axis=1)
        reactivated += (off & later).sum(axis=1)
        immediately[:-1] += (off[:-1] & masks[1:]).sum(axis=1)
    stats = [LayerReactivation(layer, int(p), int(r), int(i))
             for layer, p, r, i in zip(layers, pruned, reactivated,
                                       immediately)]
    for stat in stats:
        if stat.ratio is None:
            logger.debug("layer {0} pruned nothing; reactivation ratio "
                         "undefined".format(stat.layer))
    return stats


def foreground_usage(traces, labels, n_layers, background=0):
    """
    Mean token usage over foreground and over background tokens.

    :Returns:
        ``(foreground, background, gap)``; an entry is None when no token of
        that kind exists.
    """
    fg, bg = [], []
    for trace, label in zip(traces, labels):
        usage = token_usage(trace, n_layers)
        label = np.asarray(label)
        fg.append(usage[label != background])
        bg.append(usage[label == background])
    fg = np.concatenate(fg) if fg else np.zeros(0)
    bg = np.concatenate(bg) if bg else np.zeros(0)
    fg_mean = float(fg.mean()) if fg.size else None
    bg_mean = float(bg.mean()) if bg.size else None
    gap = fg_mean - bg_mean if fg_mean is not None and bg_mean is not None \
        else None
    return fg_mean, bg_mean, gap


def mask_divergence(traces):
    """
    For each pair of consecutive gated layers, the mean fraction of tokens
    whose keep decision differs.
    """
    if not traces or traces[0].masks.shape[0] < 2:
        return []
    flips = np.mean([np.mean(trace.masks[1:] != trace.masks[:-1], axis=1)
                     for trace in traces], axis=0)
    return [float(f) for f in flips]
