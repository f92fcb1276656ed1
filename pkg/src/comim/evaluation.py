"""Frozen-encoder evaluation: classification accuracy and KNN retrieval.

Embeddings come from the unmasked forward pass pooled the same way training
pools them. Images are embedded in fixed-size chunks (the tail chunk is
padded and trimmed) so every image goes through identically shaped GEMMs;
this keeps embeddings bit-stable under dataset reordering.
"""

from dataclasses import dataclass

import numpy as np

from .model import clean_pass


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # float32 [M, d]
    labels: np.ndarray  # int64 [M]


def embed_dataset(images, labels, params, enc_cfg, chunk=64):
    """Pooled representations for every image, batched without masking."""
    imgs = np.asarray(images, dtype=np.float32)
    labs = np.asarray(labels, dtype=np.int64)
    m = imgs.shape[0]
    out = np.empty((m, enc_cfg.dim), dtype=np.float32)
    for lo in range(0, m, chunk):
        hi = min(m, lo + chunk)
        block = imgs[lo:hi]
        if hi - lo < chunk:  # pad so GEMM shapes never vary with the tail size
            pad = np.repeat(block[-1:], chunk - (hi - lo), axis=0)
            block = np.concatenate([block, pad], axis=0)
        pooled = clean_pass(block, params, enc_cfg)
        out[lo:hi] = pooled.data[: hi - lo]
    return EmbeddingSet(vectors=out, labels=labs)


def predict_classes(embeddings, params):
    """argmax over head logits; ties resolve to the lowest class index."""
    w = params["head/w"].data
    b = params["head/b"].data
    logits = embeddings.vectors @ w + b
    return logits.argmax(axis=1)


def accuracy(images, labels, params, enc_cfg, chunk=64):
    """Fraction of images whose predicted class matches the label."""
    emb = embed_dataset(images, labels, params, enc_cfg, chunk=chunk)
    return float((predict_classes(emb, params) == emb.labels).mean())


def _normalize_rows(vectors, who):
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.sqrt((v * v).sum(axis=1))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"{who} embedding row {int(bad[0])} has zero norm")
    return v / norms[:, None]


def knn_recall_at_1(query, index, metric="cosine"):
    """Recall@1 of nearest-neighbour label retrieval from query into index.

    Cosine (the default) L2-normalizes and ranks by inner product; 'l2' ranks
    by squared Euclidean distance without normalizing. Ties pick the earliest
    index row.
    """
    if metric == "cosine":
        q = _normalize_rows(query.vectors, "query")
        ix = _normalize_rows(index.vectors, "index")
        nearest = (q @ ix.T).argmax(axis=1)
    elif metric == "l2":
        q = np.asarray(query.vectors, dtype=np.float64)
        ix = np.asarray(index.vectors, dtype=np.float64)
        d2 = (q * q).sum(axis=1)[:, None] - 2.0 * (q @ ix.T) + (ix * ix).sum(axis=1)[None, :]
        nearest = d2.argmin(axis=1)
    else:
        raise ValueError(f"metric must be 'cosine' or 'l2', got {metric!r}")
    return float((np.asarray(index.labels)[nearest] == np.asarray(query.labels)).mean())
