"""Discrete patch tokenizer: a k-means codebook over raw flattened patches.

Stands in for a learned image tokenizer at desk scale. Fitting is plain
Lloyd's algorithm with a seeded uniform init over distinct input patches and
farthest-point reseeding for empty clusters, so the whole procedure is
deterministic given (patches, vocab, iters, seed). Assignment breaks ties
toward the lowest centroid index.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .encoder import patchify, unpatchify

_MAGIC = b"CDBK"
_VERSION = 1


@dataclass
class Codebook:
    vectors: np.ndarray  # float32 [V, dim]

    @property
    def vocab(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def _chunked_assign(points, centroids):
    """(assignments, squared distance to own centroid), float64 math.

    Distances are computed as elementwise squared differences summed over the
    feature axis, in chunks sized to bound the [chunk, V, dim] temporary.
    """
    pts = np.asarray(points, dtype=np.float64)
    cen = np.asarray(centroids, dtype=np.float64)
    m = pts.shape[0]
    assign = np.empty(m, dtype=np.int64)
    mind2 = np.empty(m, dtype=np.float64)
    chunk = max(1, (1 << 24) // max(1, cen.shape[0] * cen.shape[1]))
    for lo in range(0, m, chunk):
        hi = min(m, lo + chunk)
        d2 = ((pts[lo:hi, None, :] - cen[None, :, :]) ** 2).sum(axis=-1)
        assign[lo:hi] = d2.argmin(axis=1)  # argmin takes the first (lowest) index on ties
        mind2[lo:hi] = d2[np.arange(hi - lo), assign[lo:hi]]
    return assign, mind2


def fit_codebook(patches, vocab, iters, seed):
    """Fit a V-entry codebook with `iters` Lloyd iterations.

    Returns (codebook, objective_history); the history holds the summed
    squared distance after each assignment step and is non-increasing.
    """
    pts = np.asarray(patches, dtype=np.float32)
    if pts.ndim != 2:
        raise ValueError(f"patches must be [count, dim], got shape {pts.shape}")
    m = pts.shape[0]
    if m < vocab:
        raise ValueError(f"need at least {vocab} patches to fit a {vocab}-entry codebook, got {m}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    centroids = pts[rng.choice(m, size=vocab, replace=False)].astype(np.float64)

    history = []
    for _ in range(iters):
        assign, mind2 = _chunked_assign(pts, centroids)
        history.append(float(mind2.sum()))
        sums = np.zeros((vocab, pts.shape[1]), dtype=np.float64)
        np.add.at(sums, assign, pts.astype(np.float64))
        counts = np.bincount(assign, minlength=vocab)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            taken = mind2.copy()
            for c in np.flatnonzero(~nonempty):
                far = int(taken.argmax())
                centroids[c] = pts[far]
                taken[far] = -np.inf  # each empty cluster claims a distinct point
    return Codebook(vectors=centroids.astype(np.float32)), history


def assign_tokens(flat_patches, codebook):
    """Nearest-centroid token for each row of [*, dim]."""
    pts = np.asarray(flat_patches, dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != codebook.dim:
        raise ValueError(f"patches must be [count, {codebook.dim}], got shape {pts.shape}")
    assign, _ = _chunked_assign(pts, codebook.vectors)
    return assign


def tokenize(image, patch_size, codebook):
    """Token ids [N] for one [H, W, C] image."""
    img = np.asarray(image, dtype=np.float32)
    patches = patchify(img[None], patch_size)[0]
    return assign_tokens(patches, codebook)


def tokenize_batch(images, patch_size, codebook):
    """Token ids [B, N] for a batch; row b equals tokenize(images[b])."""
    imgs = np.asarray(images, dtype=np.float32)
    patches = patchify(imgs, patch_size)
    b, n, dim = patches.shape
    return assign_tokens(patches.reshape(b * n, dim), codebook).reshape(b, n)


def detokenize(tokens, patch_size, image_size, channels, codebook):
    """Paste each token's centroid back into its patch slot; lossy inverse."""
    tok = np.asarray(tokens, dtype=np.int64)
    n = (image_size // patch_size) ** 2
    if tok.shape != (n,):
        raise ValueError(f"expected {n} tokens for a {image_size}x{image_size}/{patch_size} grid, got {tok.shape}")
    if tok.size and (tok.min() < 0 or tok.max() >= codebook.vocab):
        raise ValueError(f"token id out of range for vocabulary {codebook.vocab}")
    patches = codebook.vectors[tok]
    return unpatchify(patches[None], image_size, patch_size, channels)[0]


def save_codebook(codebook, path):
    """Write the binary codebook: CDBK magic, version, V, dim, f32 rows (little-endian)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _VERSION, codebook.vocab, codebook.dim))
        f.write(np.ascontiguousarray(codebook.vectors, dtype="<f4").tobytes())


def load_codebook(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, vocab, dim = struct.unpack_from("<III", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported codebook version {version}")
    need = 16 + vocab * dim * 4
    if len(blob) != need:
        raise ValueError(f"{path}: expected {need} bytes for a {vocab}x{dim} codebook, got {len(blob)}")
    vectors = np.frombuffer(blob, dtype="<f4", offset=16).reshape(vocab, dim).copy()
    return Codebook(vectors=vectors)
