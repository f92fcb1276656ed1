"""Linear classification head and its one-vs-all sigmoid loss."""

import numpy as np

from . import autodiff as ad
from .rng import truncated_normal


def init_head_params(dim, num_classes, rng):
    return {
        "head/w": ad.Tensor(truncated_normal(rng, (dim, num_classes), 0.02), requires_grad=True),
        "head/b": ad.Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True),
    }


def class_logits(pooled, params):
    """Pooled representation [B, d] or [d] -> class logits [B, K] or [K]."""
    single = pooled.ndim == 1
    x = ad.reshape(pooled, (1, pooled.shape[0])) if single else pooled
    out = ad.add_bias(ad.matmul(x, params["head/w"]), params["head/b"])
    return ad.reshape(out, (out.shape[1],)) if single else out


def sigmoid_ce(logits, labels):
    """Sum of per-class sigmoid cross entropies against a one-hot label, batch-averaged."""
    return ad.sigmoid_cross_entropy(logits, labels)
