"""Vision transformer encoder over image patches.

Patches are cut in raster order (top-left to bottom-right) and flattened
(row, column, channel). Blocks are pre-norm: x + attn(ln(x)), then
x + mlp(ln(x)), with one final layer norm after the last block. Positional
embeddings are a learnable table indexed by a token's *original* grid
position, so a partially visible sequence (token dropping for MIM) keeps the
same rows it would have had in the full sequence.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import truncated_normal

INIT_STD = 0.02


@dataclass
class EncoderConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    pooling: str = "gap"  # how the classification representation is pooled
    use_cls: bool = None  # prepend a [CLS] token; defaults to pooling == "cls"
    dropout: float = 0.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"patch size {self.patch_size} must divide image size {self.image_size}")
        if self.dim % self.heads != 0:
            raise ValueError(f"head count {self.heads} must divide dim {self.dim}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.pooling not in ("gap", "cls"):
            raise ValueError(f"pooling must be 'gap' or 'cls', got {self.pooling!r}")
        if self.use_cls is None:
            self.use_cls = self.pooling == "cls"
        if self.pooling == "cls" and not self.use_cls:
            raise ValueError("pooling='cls' requires use_cls=True")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self):
        return int(round(self.dim * self.mlp_ratio))


def patchify(images, patch_size):
    """[B, H, W, C] -> [B, N, p*p*C] in raster patch order, (row, col, chan) flattening."""
    imgs = np.asarray(images)
    if imgs.ndim != 4:
        raise ValueError(f"patchify expects [B, H, W, C], got shape {imgs.shape}")
    b, h, w, c = imgs.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"patch size {patch_size} must divide image dims {h}x{w}")
    gh, gw = h // patch_size, w // patch_size
    x = imgs.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # [B, gh, gw, p, p, C]
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch_size * patch_size * c))


def unpatchify(patches, image_size, patch_size, channels):
    """Inverse of patchify for square images."""
    p = np.asarray(patches)
    b, n, _ = p.shape
    g = image_size // patch_size
    x = p.reshape(b, g, g, patch_size, patch_size, channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, image_size, image_size, channels))


def _block_param_names(prefix):
    names = []
    for leaf in ("ln1/g", "ln1/b", "attn/wq", "attn/bq", "attn/wk", "attn/bk",
                 "attn/wv", "attn/bv", "attn/wo", "attn/bo",
                 "ln2/g", "ln2/b", "mlp/w1", "mlp/b1", "mlp/w2", "mlp/b2"):
        names.append(f"{prefix}/{leaf}")
    return names


def init_block_params(params, prefix, dim, mlp_dim, rng):
    """Initialize one transformer block's tensors into `params` under `prefix`."""
    def p(name, arr):
        params[f"{prefix}/{name}"] = ad.Tensor(arr, requires_grad=True)

    p("ln1/g", np.ones(dim, dtype=np.float32))
    p("ln1/b", np.zeros(dim, dtype=np.float32))
    for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
        p(f"attn/{w}", truncated_normal(rng, (dim, dim), INIT_STD))
        p(f"attn/{b}", np.zeros(dim, dtype=np.float32))
    p("ln2/g", np.ones(dim, dtype=np.float32))
    p("ln2/b", np.zeros(dim, dtype=np.float32))
    p("mlp/w1", truncated_normal(rng, (dim, mlp_dim), INIT_STD))
    p("mlp/b1", np.zeros(mlp_dim, dtype=np.float32))
    p("mlp/w2", truncated_normal(rng, (mlp_dim, dim), INIT_STD))
    p("mlp/b2", np.zeros(dim, dtype=np.float32))


def init_encoder_params(cfg, rng):
    """Fresh encoder parameter registry (insertion-ordered dict of name -> Tensor)."""
    params = {}
    params["enc/patch_proj/w"] = ad.Tensor(truncated_normal(rng, (cfg.patch_dim, cfg.dim), INIT_STD), requires_grad=True)
    params["enc/patch_proj/b"] = ad.Tensor(np.zeros(cfg.dim, dtype=np.float32), requires_grad=True)
    rows = cfg.n_patches + (1 if cfg.use_cls else 0)  # row N (when present) belongs to [CLS]
    params["enc/pos"] = ad.Tensor(truncated_normal(rng, (rows, cfg.dim), INIT_STD), requires_grad=True)
    if cfg.use_cls:
        params["enc/cls"] = ad.Tensor(truncated_normal(rng, (cfg.dim,), INIT_STD), requires_grad=True)
    for i in range(cfg.depth):
        init_block_params(params, f"enc/block{i}", cfg.dim, cfg.mlp_dim, rng)
    params["enc/ln_f/g"] = ad.Tensor(np.ones(cfg.dim, dtype=np.float32), requires_grad=True)
    params["enc/ln_f/b"] = ad.Tensor(np.zeros(cfg.dim, dtype=np.float32), requires_grad=True)
    return params


def _dropout(x, p, rng):
    if p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout > 0 needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return ad.mul(x, ad.Tensor(keep))


def transformer_block(x, params, prefix, heads, dropout=0.0, rng=None, capture=None):
    """Pre-norm block: x + MHSA(ln(x)); x + MLP(ln(x)). x is [B, T, d]."""
    b, t, d = x.shape
    dh = d // heads

    h = ad.layer_norm(x, params[f"{prefix}/ln1/g"], params[f"{prefix}/ln1/b"])
    q = ad.add_bias(ad.matmul(h, params[f"{prefix}/attn/wq"]), params[f"{prefix}/attn/bq"])
    k = ad.add_bias(ad.matmul(h, params[f"{prefix}/attn/wk"]), params[f"{prefix}/attn/bk"])
    v = ad.add_bias(ad.matmul(h, params[f"{prefix}/attn/wv"]), params[f"{prefix}/attn/bv"])
    # [B, T, d] -> [B, heads, T, dh]
    q = ad.transpose(ad.reshape(q, (b, t, heads, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (b, t, heads, dh)), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(v, (b, t, heads, dh)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.softmax_rows(scores)  # [B, heads, T, T]
    if capture is not None:
        capture.setdefault("attention", []).append(attn.data)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    out = ad.add_bias(ad.matmul(ctx, params[f"{prefix}/attn/wo"]), params[f"{prefix}/attn/bo"])
    x = ad.add(x, _dropout(out, dropout, rng))

    h = ad.layer_norm(x, params[f"{prefix}/ln2/g"], params[f"{prefix}/ln2/b"])
    h = ad.add_bias(ad.matmul(h, params[f"{prefix}/mlp/w1"]), params[f"{prefix}/mlp/b1"])
    h = ad.gelu(h)
    h = ad.add_bias(ad.matmul(h, params[f"{prefix}/mlp/w2"]), params[f"{prefix}/mlp/b2"])
    return ad.add(x, _dropout(h, dropout, rng))


def encode(images, params, cfg, visible=None, rng=None, capture=None):
    """Encode a batch of images; returns token outputs [B, T, dim].

    `visible` restricts the sequence to those original patch positions (int
    indices, [K] shared or [B, K] per image, unique within a row, any order).
    T = K (+1 with a [CLS] token, at position 0). `visible=None` means the
    full grid and runs the identical code path with all indices.
    """
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim == 3:
        imgs = imgs[None]
    b = imgs.shape[0]
    n = cfg.n_patches
    if visible is None:
        vis = np.broadcast_to(np.arange(n), (b, n))
    else:
        vis = np.asarray(visible, dtype=np.int64)
        if vis.ndim == 1:
            vis = np.broadcast_to(vis, (b, vis.shape[0]))
        if vis.ndim != 2 or vis.shape[0] != b:
            raise ValueError(f"visible must be [K] or [B, K], got shape {vis.shape}")
        for row in vis:
            if row.size != np.unique(row).size:
                raise ValueError("visible indices must be unique within an image")
        if vis.size and (vis.min() < 0 or vis.max() >= n):
            raise IndexError(f"visible index out of range for grid of {n} patches")

    patches = patchify(imgs, cfg.patch_size)  # constants: no gradient to pixels
    gathered = patches[np.arange(b)[:, None], vis]  # [B, K, patch_dim]
    x = ad.add_bias(ad.matmul(ad.Tensor(gathered), params["enc/patch_proj/w"]), params["enc/patch_proj/b"])
    x = ad.add(x, ad.gather_rows(params["enc/pos"], vis))

    if cfg.use_cls:
        cls = ad.reshape(params["enc/cls"], (1, 1, cfg.dim))
        cls = ad.add(cls, ad.reshape(ad.slice_axis(params["enc/pos"], 0, n, n + 1), (1, 1, cfg.dim)))
        x = ad.concat([ad.tile_axis(cls, b, 0), x], axis=1)

    for i in range(cfg.depth):
        x = transformer_block(x, params, f"enc/block{i}", cfg.heads,
                              dropout=cfg.dropout, rng=rng, capture=capture)
    return ad.layer_norm(x, params["enc/ln_f/g"], params["enc/ln_f/b"])


def pool(encoded, mode, has_cls=False):
    """Pool token outputs [B, T, d] (or [T, d]) to a representation [B, d] (or [d]).

    GAP averages patch tokens, excluding [CLS] when present; CLS takes the
    [CLS] output and requires one to exist.
    """
    single = encoded.ndim == 2
    x = ad.reshape(encoded, (1,) + encoded.shape) if single else encoded
    if mode == "gap":
        if has_cls:
            x = ad.slice_axis(x, 1, 1, x.shape[1])
        out = ad.reduce(x, "mean", axis=1)
    elif mode == "cls":
        if not has_cls:
            raise ValueError("CLS pooling requires a [CLS] token in the sequence")
        out = ad.reshape(ad.slice_axis(x, 1, 0, 1), (x.shape[0], x.shape[2]))
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return ad.reshape(out, (out.shape[1],)) if single else out
