"""Parameter registry and the composite forward passes used in training.

The co-training objective touches the encoder through two routes per batch:
a classification pass and a masked reconstruction pass over the same images.
Both are assembled here from the encoder/decoder/head pieces so the trainer
and the eval code share one definition.
"""

import numpy as np

from . import autodiff as ad
from .decoder import decode, init_decoder_params
from .encoder import encode, init_encoder_params, pool
from .heads import class_logits, init_head_params


def build_params(enc_cfg, num_classes, init_rng, dec_cfg=None):
    """Initialize the full registry. Encoder and head draws come first so a
    run without a decoder consumes the identical init stream prefix."""
    params = init_encoder_params(enc_cfg, init_rng)
    params.update(init_head_params(enc_cfg.dim, num_classes, init_rng))
    if dec_cfg is not None:
        params.update(init_decoder_params(dec_cfg, init_rng))
    return params


def decays(name):
    """Weight decay applies to matmul weight matrices only: not biases, norm
    gains, positional tables, or the [CLS] row."""
    leaf = name.rsplit("/", 1)[-1]
    return leaf.startswith("w")


def reinit_head(params, dim, num_classes, rng):
    """Replace the classifier head in place (label-space change between stages)."""
    params.update(init_head_params(dim, num_classes, rng))


def clean_pass(images, params, enc_cfg):
    """Unmasked encoder pass -> pooled representation [B, d]."""
    encoded = encode(images, params, enc_cfg)
    return pool(encoded, enc_cfg.pooling, has_cls=enc_cfg.use_cls)


def masked_pass(images, mask_bits, params, enc_cfg, fill="gap"):
    """Encoder pass over visible tokens only.

    Returns (patch_outputs [B, K, d], pooled [B, d], fill_vec [B, d]):
    pooled follows enc_cfg.pooling; fill_vec is the decoder's fill source,
    the mean of visible patch outputs ('gap') or the [CLS] output ('cls').
    """
    bits = np.asarray(mask_bits, dtype=bool)
    if bits.ndim != 2:
        raise ad.ShapeError(f"mask bits must be [B, N], got shape {bits.shape}")
    counts = np.unique(bits.sum(axis=1))
    if counts.size > 1:
        raise ad.ShapeError(f"per-image popcounts differ within the batch: {counts.tolist()}")
    visible = np.stack([np.flatnonzero(~row) for row in bits])
    encoded = encode(images, params, enc_cfg, visible=visible)

    if enc_cfg.use_cls:
        patch_out = ad.slice_axis(encoded, 1, 1, encoded.shape[1])
        cls_out = ad.reshape(ad.slice_axis(encoded, 1, 0, 1), (encoded.shape[0], enc_cfg.dim))
    else:
        patch_out = encoded
        cls_out = None
    gap_vis = ad.reduce(patch_out, "mean", axis=1)

    if fill == "gap":
        fill_vec = gap_vis
    elif fill == "cls":
        if cls_out is None:
            raise ValueError("fill='cls' requires a [CLS] token in the encoder")
        fill_vec = cls_out
    else:
        raise ValueError(f"fill must be 'gap' or 'cls', got {fill!r}")
    pooled = gap_vis if enc_cfg.pooling == "gap" else cls_out
    return patch_out, pooled, fill_vec


def mim_logits(patch_out, mask_bits, fill_vec, params, dec_cfg):
    """Reassemble (visible outputs + fill at masked slots) and decode to [B, N, V]."""
    bits = np.asarray(mask_bits, dtype=bool)
    reassembled = ad.fill_masked_rows(patch_out, bits, fill_vec)
    return decode(reassembled, params, dec_cfg)


def classification_logits(pooled, params):
    return class_logits(pooled, params)
