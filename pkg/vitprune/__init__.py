"""
This library provides token pruning for isotropic vision transformers: a
per-layer gate decides which tokens each block processes, pruned tokens are
preserved (carried forward unchanged) rather than removed, and tokens pruned
at one layer may be reactivated at a later one.  The salient entry point is
:func:`~vitprune.pruning_engine.run_backbone`, which runs the gated backbone
either in training mode (masked blocks, Gumbel-sampled masks, gradients
through a small tape-based autodiff) or in inference mode (gathered blocks
that only compute on kept tokens).

:License: MIT
"""
from .params import BackboneParams, ModelDims, init_params
from .pruning_engine import MaskTrace, PruneConfig, run_backbone
from .config import ExperimentConfig, load_config
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .about import (__name__, __version__, __author__, __author_email__,
                    __description__, __license__, __url__)


__all__ = [BackboneParams, ModelDims, init_params,
           MaskTrace, PruneConfig, run_backbone,
           ExperimentConfig, load_config,
           Checkpoint, load_checkpoint, save_checkpoint,
           __name__, __version__, __author__, __author_email__,
           __description__, __license__, __url__]
