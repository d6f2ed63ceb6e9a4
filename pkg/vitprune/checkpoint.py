"""
Checkpoints
===========

Binary, little-endian, byte-exact round trip::

    magic        8 bytes   b"VITPRUNE"
    version      uint32
    dims         7 × uint32  layers, heads, width, patch, image_size,
                             channels, classes
    stage        uint8 length + ASCII ("dense" or "sparse")
    seed         int64     master seed
    n_tensors    uint32
    per tensor, in sorted name order:
        name     uint16 length + UTF-8 bytes
        rank     uint8
        dims     rank × uint32
        payload  float64 IEEE-754, row-major

.. autoclass:: vitprune.checkpoint.Checkpoint
    :members:

.. autofunction:: vitprune.checkpoint.save_checkpoint

.. autofunction:: vitprune.checkpoint.load_checkpoint
"""
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagicError, CheckpointError, ConfigError,
                     TruncatedCheckpointError, UnsupportedVersionError)
from .params import BackboneParams, ModelDims

MAGIC = b"VITPRUNE"
VERSION = 1
STAGES = ("dense", "sparse")
_DIM_FIELDS = ("layers", "heads", "width", "patch", "image_size", "channels",
               "classes")

logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    """
    Saved model state.  `tensors` are validated against `dims` when the
    checkpoint is turned into :class:`~vitprune.params.BackboneParams`.
    """
    dims: ModelDims
    tensors: dict
    stage: str
    seed: int
    version: int = VERSION

    @classmethod
    def from_params(cls, params, stage, seed):
        return cls(params.dims, dict(params.tensors), stage, int(seed))

    @property
    def params(self):
        return BackboneParams(self.dims, self.tensors)


def dumps(checkpoint):
    """
    Serialises `checkpoint` to bytes.
    """
    if checkpoint.stage not in STAGES:
        raise CheckpointError("unknown stage {0!r}".format(checkpoint.stage))
    parts = [MAGIC, struct.pack("<I", checkpoint.version),
             struct.pack("<7I", *(getattr(checkpoint.dims, name)
                                  for name in _DIM_FIELDS))]
    stage = checkpoint.stage.encode("ascii")
    parts.append(struct.pack("<B", len(stage)) + stage)
    parts.append(struct.pack("<q", checkpoint.seed))
    parts.append(struct.pack("<I", len(checkpoint.tensors)))
    for name in sorted(checkpoint.tensors):
        value = np.ascontiguousarray(checkpoint.tensors[name],
                                     dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack("<{0}I".format(value.ndim), *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise TruncatedCheckpointError(
                len(self.data), self.offset + size - len(self.data))
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _text(raw, encoding, what):
    try:
        return raw.decode(encoding)
    except UnicodeDecodeError:
        raise CheckpointError("{0} is not {1}: {2!r}".format(
            what, encoding, raw))


def _dims(values):
    try:
        return ModelDims(*values).validate()
    except ConfigError as e:
        raise CheckpointError("stored dims {0} are invalid: {1}".format(
            values, e))


def loads(data, validate=True):
    """
    Parses checkpoint bytes.  With `validate`, every tensor shape is checked
    against the stored dims.
    """
    reader = _Reader(data)
    magic = reader.take(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError("not a checkpoint (magic {0!r})".format(magic))
    version, = reader.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(version, (VERSION,))
    dims = _dims(reader.unpack("<7I"))
    length, = reader.unpack("<B")
    stage = _text(reader.take(length), "ascii", "stage")
    if stage not in STAGES:
        raise CheckpointError("unknown stage {0!r}".format(stage))
    seed, = reader.unpack("<q")
    count, = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        length, = reader.unpack("<H")
        name = _text(reader.take(length), "utf-8", "tensor name")
        rank, = reader.unpack("<B")
        shape = reader.unpack("<{0}I".format(rank))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(reader.take(8 * size), dtype="<f8") \
            .astype(np.float64).reshape(shape)
    if reader.offset != len(data):
        raise CheckpointError("{0} trailing bytes after last tensor"
                              .format(len(data) - reader.offset))
    checkpoint = Checkpoint(dims, tensors, stage, seed, version)
    if validate:
        BackboneParams(dims, tensors)
    return checkpoint


def save_checkpoint(checkpoint, path):
    """
    Writes `checkpoint` to `path` atomically (temporary file, then rename).
    """
    path = str(path)
    data = dumps(checkpoint)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    logger.info("saved {0} checkpoint to {1} ({2} tensors)".format(
        checkpoint.stage, path, len(checkpoint.tensors)))


def load_checkpoint(path):
    """
    Reads a checkpoint written by :func:`save_checkpoint`.

    :Raises:
        :class:`~vitprune.errors.BadMagicError`,
        :class:`~vitprune.errors.UnsupportedVersionError`,
        :class:`~vitprune.errors.TruncatedCheckpointError`,
        :class:`~vitprune.errors.CheckpointMismatchError`
    """
    with open(str(path), "rb") as f:
        return loads(f.read())
