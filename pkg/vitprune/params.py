"""
Parameters
==========

Model dimensions and the named parameter tensors of a gated backbone.

Tensor names (layers are numbered from 1)::

    patch.w, patch.b              patch embedding (P²·ch → C)
    pos                           positional embedding (N × C)
    cls                           class token, attention-score selector only
    blocks.<l>.ln1.g / .b         pre-attention layer norm
    blocks.<l>.attn.{q,k,v,o}.w/b attention projections (C × C)
    blocks.<l>.ln2.g / .b         pre-MLP layer norm
    blocks.<l>.mlp.fc1.w/b        C → 4C
    blocks.<l>.mlp.fc2.w/b        4C → C
    gates.<l>.fc1.w/b             C → C/4
    gates.<l>.fc2.w/b             C/4 → 2
    gates.<l>.in.w/b              C → C, DynamicViT-style gate only
    head.w, head.b                per-token classifier (C → K)

.. autoclass:: vitprune.params.ModelDims
    :members:

.. autoclass:: vitprune.params.BackboneParams
    :members:

.. autofunction:: vitprune.params.init_params
"""
import logging
import re
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointMismatchError, ConfigError
from .numerics import Var

GATE_KEEP_BIAS = 2.0
INIT_STD = 0.02

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelDims:
    """
    Shape of an isotropic backbone.  The defaults are a small
    DeiT-like model.
    """
    layers: int = 12
    heads: int = 3
    width: int = 48
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    classes: int = 4

    @property
    def grid(self):
        return (self.image_size // self.patch, self.image_size // self.patch)

    @property
    def n_tokens(self):
        rows, cols = self.grid
        return rows * cols

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels

    @property
    def gate_width(self):
        return self.width // 4

    def validate(self, path="model"):
        for key in ("layers", "heads", "width", "patch", "image_size",
                    "channels", "classes"):
            if getattr(self, key) < 1:
                raise ConfigError.from_field(path, key, "must be positive")
        if self.width % self.heads:
            raise ConfigError.from_field(
                path, "heads", "must divide width {0}".format(self.width))
        if self.width < 4:
            raise ConfigError.from_field(path, "width", "must be at least 4")
        if self.image_size % self.patch:
            raise ConfigError.from_field(
                path, "patch", "must divide image_size {0}"
                .format(self.image_size))
        return self


_BLOCK = re.compile(r"^blocks\.(\d+)\.(.+)$")
_GATE = re.compile(r"^gates\.(\d+)\.(.+)$")


def expected_shape(name, dims):
    """
    Shape a tensor called `name` must have under `dims`, or None for an
    unknown name.
    """
    C, K = dims.width, dims.classes
    fixed = {
        "patch.w": (dims.patch_dim, C), "patch.b": (C,),
        "pos": (dims.n_tokens, C), "cls": (1, C),
        "head.w": (C, K), "head.b": (K,),
    }
    if name in fixed:
        return fixed[name]
    match = _BLOCK.match(name)
    if match and 1 <= int(match.group(1)) <= dims.layers:
        return {
            "ln1.g": (C,), "ln1.b": (C,), "ln2.g": (C,), "ln2.b": (C,),
            "attn.q.w": (C, C), "attn.q.b": (C,),
            "attn.k.w": (C, C), "attn.k.b": (C,),
            "attn.v.w": (C, C), "attn.v.b": (C,),
            "attn.o.w": (C, C), "attn.o.b": (C,),
            "mlp.fc1.w": (C, 4 * C), "mlp.fc1.b": (4 * C,),
            "mlp.fc2.w": (4 * C, C), "mlp.fc2.b": (C,),
        }.get(match.group(2))
    match = _GATE.match(name)
    if match and 1 <= int(match.group(1)) <= dims.layers:
        G = dims.gate_width
        return {
            "fc1.w": (C, G), "fc1.b": (G,), "fc2.w": (G, 2), "fc2.b": (2,),
            "in.w": (C, C), "in.b": (C,),
        }.get(match.group(2))
    return None


class BackboneParams:
    """
    Named float64 tensors of a backbone plus its :class:`ModelDims`.

    :Parameters:
        dims : :class:`ModelDims`
            Model shape.
        tensors : `dict`
            ``{name: numpy.ndarray}``.  Shapes are validated against `dims`.
    """

    def __init__(self, dims, tensors):
        self.dims = dims
        self.tensors = {name: np.asarray(value, dtype=np.float64)
                        for name, value in tensors.items()}
        self.validate()

    def validate(self):
        for name, value in self.tensors.items():
            shape = expected_shape(name, self.dims)
            if shape is None:
                raise CheckpointMismatchError(name, "no such tensor",
                                              value.shape)
            if value.shape != shape:
                raise CheckpointMismatchError(name, shape, value.shape)
        for name in ("patch.w", "patch.b", "pos", "head.w", "head.b"):
            if name not in self.tensors:
                raise CheckpointMismatchError(name, expected_shape(
                    name, self.dims), "missing")

    @property
    def gated_layers(self):
        return tuple(sorted({int(m.group(1)) for m in
                             map(_GATE.match, self.tensors) if m}))

    @property
    def has_class_token(self):
        return "cls" in self.tensors

    def gate_design(self, layer):
        if "gates.{0}.fc1.w".format(layer) not in self.tensors:
            return None
        return "dynamicvit" if "gates.{0}.in.w".format(layer) in \
            self.tensors else "mlp2"

    def variables(self, tape=None):
        """
        Wraps every tensor as a :class:`~vitprune.numerics.Var`; watched by
        `tape` when one is given.
        """
        if tape is None:
            return {name: Var(value) for name, value in self.tensors.items()}
        return {name: tape.watch(value)
                for name, value in self.tensors.items()}

    def copy(self):
        return BackboneParams(self.dims, {name: value.copy() for name, value
                                          in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)


def _normal(rng, shape, std=INIT_STD):
    return rng.normal(0.0, std, size=shape)


def init_gate(dims, layer, rng, design="mlp2", keep_bias=GATE_KEEP_BIAS):
    """
    Fresh gate tensors for one layer, biased towards keeping tokens so a
    finetune starts near its dense counterpart.
    """
    C, G = dims.width, dims.gate_width
    prefix = "gates.{0}.".format(layer)
    tensors = {
        prefix + "fc1.w": rng.normal(0.0, 1.0 / np.sqrt(C), size=(C, G)),
        prefix + "fc1.b": np.zeros(G),
        prefix + "fc2.w": rng.normal(0.0, 1.0 / np.sqrt(G), size=(G, 2)),
        prefix + "fc2.b": np.array([keep_bias, -keep_bias]),
    }
    if design == "dynamicvit":
        tensors[prefix + "in.w"] = rng.normal(0.0, 1.0 / np.sqrt(C),
                                              size=(C, C))
        tensors[prefix + "in.b"] = np.zeros(C)
    elif design != "mlp2":
        raise ConfigError("prune.gate_design",
                          "unknown gate design {0!r}".format(design))
    return tensors


def init_params(dims, rng, gated_layers=(), gate_design="mlp2",
                class_token=False):
    """
    Randomly initialised :class:`BackboneParams`.

    :Parameters:
        dims : :class:`ModelDims`
        rng : `numpy.random.Generator`
        gated_layers : `tuple`
            Layers (1-based) that receive a gate.
        gate_design : `str`
            "mlp2" or "dynamicvit".
        class_token : `bool`
            Adds the class token used by the attention-score selector.
    """
    dims.validate()
    C, K = dims.width, dims.classes
    tensors = {
        "patch.w": rng.normal(0.0, 1.0 / np.sqrt(dims.patch_dim),
                              size=(dims.patch_dim, C)),
        "patch.b": np.zeros(C),
        "pos": _normal(rng, (dims.n_tokens, C)),
        "head.w": _normal(rng, (C, K)),
        "head.b": np.zeros(K),
    }
    for layer in range(1, dims.layers + 1):
        prefix = "blocks.{0}.".format(layer)
        tensors[prefix + "ln1.g"] = np.ones(C)
        tensors[prefix + "ln1.b"] = np.zeros(C)
        tensors[prefix + "ln2.g"] = np.ones(C)
        tensors[prefix + "ln2.b"] = np.zeros(C)
        for proj in "qkvo":
            tensors[prefix + "attn.{0}.w".format(proj)] = _normal(rng, (C, C))
            tensors[prefix + "attn.{0}.b".format(proj)] = np.zeros(C)
        tensors[prefix + "mlp.fc1.w"] = _normal(rng, (C, 4 * C))
        tensors[prefix + "mlp.fc1.b"] = np.zeros(4 * C)
        tensors[prefix + "mlp.fc2.w"] = _normal(rng, (4 * C, C))
        tensors[prefix + "mlp.fc2.b"] = np.zeros(C)
    params = BackboneParams(dims, tensors)
    return attach_gates(params, rng, gated_layers, gate_design, class_token)


def attach_gates(params, rng, gated_layers, gate_design="mlp2",
                 class_token=False):
    """
    Returns a copy of `params` carrying gates (and optionally a class
    token) for `gated_layers`.  Existing gates of a different design are
    replaced; gates on layers not listed are dropped.
    """
    tensors = {name: value.copy() for name, value in params.tensors.items()
               if not _GATE.match(name) and name != "cls"}
    for layer in gated_layers:
        existing = params.gate_design(layer)
        if existing == gate_design:
            prefix = "gates.{0}.".format(layer)
            tensors.update({name: value.copy() for name, value in
                            params.tensors.items() if name.startswith(prefix)})
        else:
            tensors.update(init_gate(params.dims, layer, rng, gate_design))
    if class_token:
        tensors["cls"] = params.tensors["cls"].copy() if \
            params.has_class_token else _normal(rng, (1, params.dims.width))
    logger.debug("attached {0} gates ({1})".format(len(gated_layers),
                                                  gate_design))
    return BackboneParams(params.dims, tensors)
