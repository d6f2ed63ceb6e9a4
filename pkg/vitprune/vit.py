"""
ViT blocks
==========

Isotropic pre-norm transformer blocks over an N × C token map.  Blocks run in
one of two forms:

``masked``
    every token goes through the block, pruned tokens are hidden from
    attention as keys/values, and the combine ``M ⊙ block(x) + (1 − M) ⊙ x``
    restores pruned rows.  Differentiable; used for training.

``gathered``
    kept rows are gathered, a dense k-token block runs on them, and the
    results are scattered back over the previous map.  Inference only; this
    is where the speedup comes from.

Both forms agree row-wise to rounding error.

.. autofunction:: vitprune.vit.patch_embed

.. autofunction:: vitprune.vit.mhsa_masked

.. autofunction:: vitprune.vit.vit_block_forward

.. autofunction:: vitprune.vit.head_predict

.. autofunction:: vitprune.vit.class_token_attention
"""
import math

import numpy as np

from . import numerics as nx
from .errors import MaskError, ShapeError, VitPruneError

LN_EPS = 1e-6
MASKED = "masked"
GATHERED = "gathered"


def linear(x, p, name):
    return nx.add(nx.matmul(x, p[name + ".w"]), p[name + ".b"])


def patchify(image, patch):
    """
    Flattens an H × W × ch image into one row per patch, patches in
    row-major scan order, pixels inside a patch in (row, col, channel) order.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError("patch_embed", image.shape)
    height, width, channels = image.shape
    if height % patch or width % patch:
        raise ShapeError("patch_embed", image.shape, (patch, patch))
    rows, cols = height // patch, width // patch
    return image.reshape(rows, patch, cols, patch, channels) \
        .transpose(0, 2, 1, 3, 4) \
        .reshape(rows * cols, patch * patch * channels)


def patch_embed(image, p, dims):
    """
    Linear patch embedding plus positional embedding.

    :Parameters:
        image : `numpy.ndarray`
            H × W × ch image, H and W divisible by the patch size.
        p : `dict`
            ``{name: Var}`` parameters.
        dims : :class:`~vitprune.params.ModelDims`

    :Returns:
        An N × C :class:`~vitprune.numerics.Var`.
    """
    patches = patchify(image, dims.patch)
    if patches.shape[0] != p["pos"].shape[0]:
        raise ShapeError("patch_embed", patches.shape, p["pos"].shape)
    return nx.add(linear(patches, p, "patch"), p["pos"])


def _key_mask(keep):
    keep = np.asarray(keep, dtype=bool)
    if not keep.any():
        raise MaskError("attention with every token pruned")
    if keep.all():
        return None
    row = np.where(keep, 0.0, -nx.LARGE)
    return np.broadcast_to(row, (keep.size, keep.size))


def mhsa_masked(x, keep, p, prefix, heads):
    """
    Multi-head self-attention in which pruned positions get zero weight as
    keys and values for every query.  Rows at pruned positions are still
    computed; callers discard them.

    :Parameters:
        x : :class:`~vitprune.numerics.Var`
            N × C input (already layer-normalised).
        keep : `numpy.ndarray`
            Boolean keep mask of length N with at least one True.
        p : `dict`
            Parameters.
        prefix : `str`
            e.g. ``"blocks.3.attn"``.
        heads : `int`
    """
    mask = _key_mask(keep)
    width = x.shape[1]
    head_dim = width // heads
    q = linear(x, p, prefix + ".q")
    k = linear(x, p, prefix + ".k")
    v = linear(x, p, prefix + ".v")
    outputs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        logits = nx.scale(nx.matmul(nx.cols(q, lo, hi),
                                    nx.transpose(nx.cols(k, lo, hi))),
                          1.0 / math.sqrt(head_dim))
        weights = nx.softmax_rows(logits, mask)
        outputs.append(nx.matmul(weights, nx.cols(v, lo, hi)))
    return linear(nx.concat_cols(outputs), p, prefix + ".o")


def mlp(x, p, prefix):
    return linear(nx.gelu(linear(x, p, prefix + ".fc1")), p, prefix + ".fc2")


def _block(x, keep, p, layer, dims):
    prefix = "blocks.{0}".format(layer)
    h = nx.layer_norm(x, p[prefix + ".ln1.g"], p[prefix + ".ln1.b"], LN_EPS)
    u = nx.add(x, mhsa_masked(h, keep, p, prefix + ".attn", dims.heads))
    h = nx.layer_norm(u, p[prefix + ".ln2.g"], p[prefix + ".ln2.b"], LN_EPS)
    return nx.add(u, mlp(h, p, prefix + ".mlp"))


def vit_block_forward(x, keep, p, layer, dims, mode=MASKED, mask=None):
    """
    One pre-norm block (``u = x + MHSA(LN1(x))``, ``v = u + MLP(LN2(u))``)
    followed by the combine that keeps pruned rows unchanged.

    :Parameters:
        x : :class:`~vitprune.numerics.Var`
            N × C token map.
        keep : `numpy.ndarray`
            Boolean keep mask of length N.
        p : `dict`
            Parameters.
        layer : `int`
            1-based block index.
        dims : :class:`~vitprune.params.ModelDims`
        mode : `str`
            "masked" or "gathered".
        mask : :class:`~vitprune.numerics.Var`
            (optional, masked mode) N × 1 mask value used in the combine, so
            gradients reach the gate.  Defaults to `keep` as a constant.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (x.shape[0],):
        raise ShapeError("vit_block_forward", x.shape, keep.shape)
    if mode == MASKED:
        v = _block(x, keep, p, layer, dims)
        if mask is None:
            if keep.all():
                return v
            mask = nx.Var(keep[:, None])
        return nx.add(nx.mul(mask, v), nx.mul(nx.sub(1.0, mask), x))
    elif mode == GATHERED:
        if x.tape is not None or any(var.tape is not None
                                     for var in p.values()):
            raise VitPruneError("gathered blocks cannot record gradients")
        if keep.all():
            return _block(x, keep, p, layer, dims)
        index = np.flatnonzero(keep)
        if index.size == 0:
            raise MaskError("attention with every token pruned")
        kept = _block(nx.Var(x.value[index]), np.ones(index.size, dtype=bool),
                      p, layer, dims)
        merged = x.value.copy()
        merged[index] = kept.value
        return nx.Var(merged)
    else:
        raise ValueError("unknown block mode {0!r}".format(mode))


def head_predict(x, p):
    """
    Per-token linear classifier over the full map, preserved tokens
    included.  Returns N × K scores.
    """
    return linear(x, p, "head")


def class_token_attention(x, p, layer, dims):
    """
    Head-averaged attention weights from the class token (row 0 of `x`) to
    every image token, using the layer's own LN1/Q/K.  Returns a numpy
    vector over the N image tokens.
    """
    prefix = "blocks.{0}".format(layer)
    values = {name: p[name] for name in (
        prefix + ".ln1.g", prefix + ".ln1.b", prefix + ".attn.q.w",
        prefix + ".attn.q.b", prefix + ".attn.k.w", prefix + ".attn.k.b")}
    h = nx.layer_norm(nx.Var(x.value), values[prefix + ".ln1.g"],
                      values[prefix + ".ln1.b"], LN_EPS)
    q = linear(nx.Var(h.value[:1]), values, prefix + ".attn.q").value
    k = linear(h, values, prefix + ".attn.k").value
    head_dim = dims.head_dim
    total = np.zeros(x.shape[0])
    for hd in range(dims.heads):
        lo, hi = hd * head_dim, (hd + 1) * head_dim
        logits = nx.softmax_rows(
            q[:, lo:hi] @ k[:, lo:hi].T / math.sqrt(head_dim))
        total += logits.value[0]
    return total[1:] / dims.heads
