"""
Synthetic scenes
================

Dense-prediction scenes whose important tokens are known: colored geometric
shapes on a flat or textured background.  Each class has a fixed color and a
fixed shape kind; class 0 is background.  A token's label is the majority
pixel class inside its patch (ties go to the higher class id, so foreground
beats background).

Datasets draw one independent generator per image:
``numpy.random.SeedSequence(seed).spawn(n)[i]`` renders image `i`, so any
image can be regenerated alone and generation may run in parallel.

.. autoclass:: vitprune.scenes.SceneSpec
    :members:

.. autoclass:: vitprune.scenes.Shape

.. autofunction:: vitprune.scenes.gen_synthetic_scene

.. autofunction:: vitprune.scenes.render_scene

.. autofunction:: vitprune.scenes.make_dataset
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

KINDS = ("rect", "disk", "diamond")
BACKGROUND = 0

PALETTE = np.array([
    [0.50, 0.50, 0.50],
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.25, 0.90],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.05, 0.05, 0.05],
])
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SceneSpec:
    """
    :Parameters:
        image_size : `int`
            Square image side in pixels.
        patch_size : `int`
            Token patch side; must divide `image_size`.
        n_shapes : `int`
            Foreground shapes per scene.
        n_classes : `int`
            K, background included (at most 9).
        noise : `float`
            Std of additive Gaussian pixel noise.
        textured : `bool`
            Sinusoidal background texture instead of a flat one.
        channels : `int`
            1 (gray) or 3 (RGB).
        seed : `int`
            Dataset seed.
    """
    image_size: int = 32
    patch_size: int = 4
    n_shapes: int = 3
    n_classes: int = 4
    noise: float = 0.05
    textured: bool = True
    channels: int = 3
    seed: int = 0

    @property
    def grid(self):
        side = self.image_size // self.patch_size
        return (side, side)

    def validate(self, path="scenes"):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError.from_field(path, "patch_size",
                                         "must divide image_size")
        if not 2 <= self.n_classes <= len(PALETTE):
            raise ConfigError.from_field(path, "n_classes", "must lie in "
                                         "[2, {0}]".format(len(PALETTE)))
        if self.n_shapes < 0:
            raise ConfigError.from_field(path, "n_shapes",
                                         "must be nonnegative")
        if self.noise < 0:
            raise ConfigError.from_field(path, "noise", "must be nonnegative")
        if self.channels not in (1, 3):
            raise ConfigError.from_field(path, "channels", "must be 1 or 3")
        return self


@dataclass(frozen=True)
class Shape:
    """
    A shape occupying (part of) the box ``[top, top+height) ×
    [left, left+width)``.
    """
    label: int
    kind: str
    top: int
    left: int
    height: int
    width: int

    def mask(self, size):
        rows, cols = np.mgrid[0:size, 0:size]
        inside = (rows >= self.top) & (rows < self.top + self.height) & \
            (cols >= self.left) & (cols < self.left + self.width)
        if self.kind == "rect":
            return inside
        cy = self.top + (self.height - 1) / 2.0
        cx = self.left + (self.width - 1) / 2.0
        dy = (rows - cy) / (self.height / 2.0)
        dx = (cols - cx) / (self.width / 2.0)
        if self.kind == "disk":
            return inside & (dy * dy + dx * dx <= 1.0)
        elif self.kind == "diamond":
            return inside & (np.abs(dy) + np.abs(dx) <= 1.0)
        raise ValueError("unknown shape kind {0!r}".format(self.kind))


def kind_of(label):
    return KINDS[(label - 1) % len(KINDS)]


def color_of(label, channels):
    color = PALETTE[label]
    if channels == 1:
        return np.array([color @ LUMA])
    return color


def token_labels(pixel_labels, patch, n_classes):
    size = pixel_labels.shape[0]
    side = size // patch
    patches = pixel_labels.reshape(side, patch, side, patch) \
        .transpose(0, 2, 1, 3).reshape(side * side, patch * patch)
    counts = np.stack([np.bincount(row, minlength=n_classes)
                       for row in patches])
    # argmax over reversed counts picks the highest tied class id
    return n_classes - 1 - counts[:, ::-1].argmax(axis=1)


def render_scene(shapes, spec, rng):
    """
    Renders `shapes` (painted in order, later ones on top).

    :Returns:
        ``(image, token_labels, pixel_labels)``
    """
    size = spec.image_size
    if spec.textured:
        rows, cols = np.mgrid[0:size, 0:size] / float(size)
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        texture = 0.5 + 0.12 * np.sin(2 * np.pi * (fy * rows + fx * cols) +
                                      phase)
    else:
        texture = np.full((size, size), 0.5)
    tint = color_of(BACKGROUND, spec.channels) / 0.5
    image = texture[:, :, None] * tint[None, None, :]
    pixel_labels = np.zeros((size, size), dtype=np.int64)
    for shape in shapes:
        if shape.top < 0 or shape.left < 0 or \
                shape.top + shape.height > size or \
                shape.left + shape.width > size:
            raise ValueError("shape {0} does not fit a {1}px image"
                             .format(shape, size))
        inside = shape.mask(size)
        image[inside] = color_of(shape.label, spec.channels)
        pixel_labels[inside] = shape.label
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return image, token_labels(pixel_labels, spec.patch_size,
                               spec.n_classes), pixel_labels


def random_shapes(spec, rng):
    size, patch = spec.image_size, spec.patch_size
    shapes = []
    for _ in range(spec.n_shapes):
        label = int(rng.integers(1, spec.n_classes))
        low = min(patch, size)
        high = max(low, size // 2)
        height, width = (int(v) for v in rng.integers(low, high + 1, size=2))
        top = int(rng.integers(0, size - height + 1))
        left = int(rng.integers(0, size - width + 1))
        shapes.append(Shape(label, kind_of(label), top, left, height, width))
    return shapes


def gen_synthetic_scene(spec, rng):
    """
    Random scene for `spec`.

    :Returns:
        ``(image, labels)``: an H × W × ch image in [0, 1] and N token
        labels.
    """
    image, labels, _ = render_scene(random_shapes(spec, rng), spec, rng)
    return image, labels


def scene_rngs(seed, n):
    return [np.random.default_rng(child)
            for child in np.random.SeedSequence(seed).spawn(n)]


def make_dataset(spec, n, seed=None):
    """
    `n` scenes, image `i` drawn from the i-th child of
    ``SeedSequence(seed)``; `seed` defaults to ``spec.seed``.
    """
    seed = spec.seed if seed is None else seed
    return [gen_synthetic_scene(spec, rng) for rng in scene_rngs(seed, n)]


def split_seeds(seed):
    """
    Train and held-out dataset seeds derived from one dataset seed.
    """
    train, held_out = np.random.SeedSequence(seed).generate_state(2)
    return int(train), int(held_out)
