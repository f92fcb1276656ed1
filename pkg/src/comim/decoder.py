"""Shallow transformer decoder that predicts a token id per patch position.

Input is the reassembled full-length sequence (visible encoder outputs plus a
fill vector at masked slots). The decoder owns its positional table, so it
can tell two masked positions apart even though they carry the same fill.
One block is the default depth.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import init_block_params, transformer_block
from .rng import truncated_normal


@dataclass
class DecoderConfig:
    n_positions: int
    dim: int
    vocab: int
    depth: int = 1
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"decoder depth must be >= 1, got {self.depth}")
        if self.dim % self.heads != 0:
            raise ValueError(f"head count {self.heads} must divide dim {self.dim}")
        if self.vocab < 1:
            raise ValueError(f"vocabulary must be >= 1, got {self.vocab}")

    @property
    def mlp_dim(self):
        return int(round(self.dim * self.mlp_ratio))


def init_decoder_params(cfg, rng):
    params = {}
    params["dec/pos"] = ad.Tensor(truncated_normal(rng, (cfg.n_positions, cfg.dim), 0.02), requires_grad=True)
    for i in range(cfg.depth):
        init_block_params(params, f"dec/block{i}", cfg.dim, cfg.mlp_dim, rng)
    params["dec/ln_f/g"] = ad.Tensor(np.ones(cfg.dim, dtype=np.float32), requires_grad=True)
    params["dec/ln_f/b"] = ad.Tensor(np.zeros(cfg.dim, dtype=np.float32), requires_grad=True)
    params["dec/head/w"] = ad.Tensor(truncated_normal(rng, (cfg.dim, cfg.vocab), 0.02), requires_grad=True)
    params["dec/head/b"] = ad.Tensor(np.zeros(cfg.vocab, dtype=np.float32), requires_grad=True)
    return params


def decode(reassembled, params, cfg):
    """[B, N, d] reassembled sequence -> token logits [B, N, V]."""
    b, n, d = reassembled.shape
    if n != cfg.n_positions or d != cfg.dim:
        raise ad.ShapeError(f"decoder expects [B, {cfg.n_positions}, {cfg.dim}], got {reassembled.shape}")
    pos = ad.tile_axis(ad.reshape(params["dec/pos"], (1, n, d)), b, 0)
    x = ad.add(reassembled, pos)
    for i in range(cfg.depth):
        x = transformer_block(x, params, f"dec/block{i}", cfg.heads)
    x = ad.layer_norm(x, params["dec/ln_f/g"], params["dec/ln_f/b"])
    return ad.add_bias(ad.matmul(x, params["dec/head/w"]), params["dec/head/b"])


def mim_loss(logits, targets, mask_bits, mode="all"):
    """Mean token cross entropy: -log softmax(logits)[pos, target].

    mode='all' averages every position; mode='masked_only' averages the
    masked ones and rejects an empty mask. logits [B, N, V] or [N, V].
    """
    if mode not in ("all", "masked_only"):
        raise ValueError(f"loss mode must be 'all' or 'masked_only', got {mode!r}")
    tgt = np.asarray(targets)
    include = None
    if mode == "masked_only":
        include = np.asarray(mask_bits, dtype=bool)
        if include.shape != tgt.shape:
            raise ad.ShapeError(f"mask shape {include.shape} does not match targets {tgt.shape}")
        if not include.any():
            raise ValueError("masked_only loss over an empty mask is undefined")
    return ad.softmax_cross_entropy(logits, tgt, include)
