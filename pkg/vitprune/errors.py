"""
Errors
======

.. autoclass:: VitPruneError

.. autoclass:: ShapeError

.. autoclass:: MaskError

.. autoclass:: LabelError

.. autoclass:: NonFiniteError

.. autoclass:: DivergenceError

.. autoclass:: ConfigError

.. autoclass:: CheckpointError

.. autoclass:: BadMagicError

.. autoclass:: UnsupportedVersionError

.. autoclass:: TruncatedCheckpointError

.. autoclass:: CheckpointMismatchError
"""


class VitPruneError(RuntimeError):
    """
    Base class for every error raised by this library.
    """
    pass


class ShapeError(VitPruneError, ValueError):
    """
    Thrown when operands have incompatible shapes.  Both shapes are kept.
    """
    def __init__(self, op, left, right=None):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right) if right is not None else None
        if self.right is None:
            super().__init__("{0}: bad shape {1}".format(op, self.left))
        else:
            super().__init__("{0}: shapes {1} and {2} are incompatible"
                             .format(op, self.left, self.right))


class MaskError(VitPruneError, ValueError):
    """
    Thrown when a mask leaves nothing to attend to (an all-pruned layer or a
    fully masked softmax row).
    """
    pass


class LabelError(VitPruneError, ValueError):
    """
    Thrown when a class label falls outside [0, K).
    """
    pass


class NonFiniteError(VitPruneError):
    """
    Thrown when activations stop being finite inside the backbone.
    """
    def __init__(self, layer, what="activations"):
        super().__init__("non-finite {0} after layer {1}".format(what, layer))
        self.layer = layer
        self.what = what


class DivergenceError(VitPruneError):
    """
    Thrown when a training loss becomes non-finite.  Carries the last
    parameters that produced a finite loss so they can be checkpointed.
    """
    def __init__(self, stage, epoch, step, last_good):
        super().__init__("{0} training diverged at epoch {1}, step {2}"
                         .format(stage, epoch, step))
        self.stage = stage
        self.epoch = epoch
        self.step = step
        self.last_good = last_good


class ConfigError(VitPruneError, ValueError):
    """
    Thrown when an experiment configuration does not validate.  `field` is
    the dotted path of the offending key.
    """
    def __init__(self, field, message):
        super().__init__("{0}: {1}".format(field, message))
        self.field = field
        self.message = message

    @classmethod
    def from_field(cls, path, key, message):
        field = ".".join(p for p in (path, key) if p)
        return cls(field, message)


class CheckpointError(VitPruneError, IOError):
    """
    Thrown when a checkpoint file cannot be read back.
    """
    pass


class BadMagicError(CheckpointError):
    """
    Thrown when a file does not start with the checkpoint magic bytes.
    """
    pass


class UnsupportedVersionError(CheckpointError):
    """
    Thrown when a checkpoint declares a format version this library does
    not read.
    """
    def __init__(self, version, supported):
        super().__init__("unsupported checkpoint version {0} (supported: {1})"
                         .format(version, supported))
        self.version = version
        self.supported = supported


class TruncatedCheckpointError(CheckpointError):
    """
    Thrown when a checkpoint ends before its declared contents.
    """
    def __init__(self, offset, needed):
        super().__init__("checkpoint truncated at byte {0} ({1} more bytes "
                         "expected)".format(offset, needed))
        self.offset = offset
        self.needed = needed


class CheckpointMismatchError(CheckpointError):
    """
    Thrown when a checkpoint tensor does not match the configured model.
    """
    def __init__(self, name, expected, found):
        super().__init__("tensor {0!r}: expected shape {1}, found {2}"
                         .format(name, expected, found))
        self.name = name
        self.expected = expected
        self.found = found
