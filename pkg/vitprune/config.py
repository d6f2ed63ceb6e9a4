"""
Configuration
=============

Experiment configs are YAML documents with four sections plus a handful of
top-level keys.  Every key is optional except `seed`; unknown keys are
rejected with their dotted path.  Schema (defaults shown)::

    seed: 0                 # required, master seed for init and sampling
    seeds: [0, 1, 2]        # seeds of comparative runs (ablate, compare-gates)
    out_dir: runs/default   # overridden by $VITPRUNE_OUT, then by --out
    train_scenes: 256
    eval_scenes: 64
    threads: 1              # image-parallel evaluation
    sweep_ratios: [1.0, 0.9, 0.8, 0.7, 0.6, 0.5]
    model:
      layers: 12
      heads: 3
      width: 48
      patch: 4
      image_size: 32
      channels: 3
      classes: 4
    prune:
      selector: gate_mlp    # or attention_score
      gate_design: mlp2     # or dynamicvit
      rate_mode: dynamic    # or fixed
      preserve: true
      reactivate: true
      gated_layers: [4, 5, 6, 7, 8, 9, 10, 11, 12]
      keep_ratios: [0.7, 0.7, 0.7, 0.49, 0.49, 0.49, 0.343, 0.343, 0.343]
      loss_lambda: 4.0
      tau: 1.0
      straight_through: true
    optim:
      dense_epochs: 30
      sparse_epochs: 10
      batch_size: 8
      dense_lr: 0.001
      sparse_lr: 0.00001
      beta1: 0.9
      beta2: 0.999
      eps: 1.0e-08
    scenes:
      image_size: 32        # must equal model.image_size
      patch_size: 4         # must equal model.patch
      n_shapes: 3
      n_classes: 4          # must equal model.classes
      noise: 0.05
      textured: true
      channels: 3           # must equal model.channels
      seed: 0

.. autoclass:: vitprune.config.ExperimentConfig
    :members:

.. autofunction:: vitprune.config.load_config
"""
import dataclasses
import logging
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .params import ModelDims
from .pruning_engine import PruneConfig
from .scenes import SceneSpec

RESOLVED_NAME = "config.resolved.yaml"

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    """
    Adam settings for the dense stage and the sparse finetune.  The sparse
    learning rate defaults to 1e-5.
    """
    dense_epochs: int = 30
    sparse_epochs: int = 10
    batch_size: int = 8
    dense_lr: float = 1e-3
    sparse_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self, path="optim"):
        for key in ("dense_epochs", "sparse_epochs"):
            if getattr(self, key) < 0:
                raise ConfigError.from_field(path, key, "must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError.from_field(path, "batch_size",
                                         "must be positive")
        for key in ("dense_lr", "sparse_lr", "eps"):
            if getattr(self, key) <= 0:
                raise ConfigError.from_field(path, key, "must be positive")
        for key in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError.from_field(path, key, "must lie in [0, 1)")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything one run needs.  Build with :func:`load_config` or
    :meth:`from_dict` so that validation happens.
    """
    seed: int
    model: ModelDims = field(default_factory=ModelDims)
    prune: PruneConfig = field(default_factory=PruneConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    scenes: SceneSpec = field(default_factory=SceneSpec)
    seeds: tuple = (0, 1, 2)
    out_dir: str = "runs/default"
    train_scenes: int = 256
    eval_scenes: int = 64
    threads: int = 1
    sweep_ratios: tuple = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)

    @classmethod
    def from_dict(cls, doc):
        return _build(cls, doc, "").validate()

    def to_dict(self):
        return _to_plain(dataclasses.asdict(self))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()

    def validate(self):
        self.model.validate()
        self.prune.validate(self.model)
        self.optim.validate()
        self.scenes.validate()
        for key, model_key in (("image_size", "image_size"),
                               ("patch_size", "patch"),
                               ("n_classes", "classes"),
                               ("channels", "channels")):
            if getattr(self.scenes, key) != getattr(self.model, model_key):
                raise ConfigError.from_field(
                    "scenes", key, "must equal model.{0} ({1})".format(
                        model_key, getattr(self.model, model_key)))
        if not self.seeds:
            raise ConfigError("seeds", "needs at least one seed")
        for key in ("train_scenes", "eval_scenes", "threads"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be positive")
        if any(not 0.0 < r <= 1.0 for r in self.sweep_ratios):
            raise ConfigError("sweep_ratios", "values must lie in (0, 1]")
        return self


_SECTIONS = {"model": ModelDims, "prune": PruneConfig, "optim": OptimConfig,
             "scenes": SceneSpec}
_ITEM_TYPES = {"gated_layers": int, "keep_ratios": float, "seeds": int,
               "sweep_ratios": float}


def _coerce(value, kind, path):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    raise ConfigError(path, "unsupported value")


def _build(cls, doc, path):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(path or "<root>", "expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError.from_field(path, str(key), "unknown key")
    values = {}
    for name, f in known.items():
        here = ".".join(p for p in (path, name) if p)
        if name not in doc:
            if f.default is dataclasses.MISSING and \
                    f.default_factory is dataclasses.MISSING:
                raise ConfigError(here, "required field missing")
            continue
        value = doc[name]
        if name in _SECTIONS and cls is ExperimentConfig:
            values[name] = _build(_SECTIONS[name], value, here)
        elif name in _ITEM_TYPES:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(here, "expected a list")
            values[name] = tuple(_coerce(v, _ITEM_TYPES[name],
                                         "{0}[{1}]".format(here, i))
                                 for i, v in enumerate(value))
        else:
            values[name] = _coerce(value, f.type, here)
    return cls(**values)


def _to_plain(value):
    if isinstance(value, dict):
        return {key: _to_plain(v) for key, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def load_config(path):
    """
    Reads and validates an :class:`ExperimentConfig` from a YAML file.
    """
    with open(path) as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError("<root>", "not valid YAML: {0}".format(e))
    logger.debug("loaded config from {0}".format(path))
    return ExperimentConfig.from_dict(doc)


def dump_config(config):
    return yaml.safe_dump(config.to_dict(), sort_keys=True,
                          default_flow_style=False)


def write_resolved(config, directory):
    """
    Writes the fully-resolved config into `directory` and returns its path.
    """
    path = directory / RESOLVED_NAME
    path.write_text(dump_config(config))
    return path
