"""Synthetic labeled images, raw export format, and train-time augmentation.

Each class is a sinusoidal grating with a class-specific orientation and
frequency; a seeded per-cell texture motif and per-image pixel noise are laid
on top, so images have both a global label signal (for classification) and
local structure (for patch tokens). Two variants, "a" and "b", use disjoint
grating parameter tables but share texture statistics, giving a
pretrain/finetune pair. Pixel values are quantized to the u8 grid at
generation time so raw export round-trips bit-exactly.
"""

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"RIMG"
_VERSION = 1

VARIANTS = ("a", "b")


@dataclass
class SynthSpec:
    n_train: int = 5000
    n_val: int = 1000
    num_classes: int = 8
    image_size: int = 32
    channels: int = 3
    noise: float = 0.05
    seed: int = 0
    variant: str = "a"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")


@dataclass
class SynthDataset:
    train_images: np.ndarray  # float32 [n, H, W, C] in [0, 1]
    train_labels: np.ndarray  # int64 [n]
    val_images: np.ndarray
    val_labels: np.ndarray
    spec: SynthSpec = field(default=None)


def variant_class_params(num_classes, variant):
    """Per-class (orientation, frequency) table; disjoint between variants."""
    if variant == "a":
        thetas = [np.pi * k / num_classes for k in range(num_classes)]
        freqs = [2.0 + (k % 3) for k in range(num_classes)]
    elif variant == "b":
        thetas = [np.pi * (k + 0.5) / num_classes for k in range(num_classes)]
        freqs = [5.0 + (k % 3) for k in range(num_classes)]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return list(zip(thetas, freqs))


def _texture_bank(spec):
    """Fixed per-cell motifs shared by every image (and both variants) of a seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=spec.seed, spawn_key=(2,))))
    cell = max(1, spec.image_size // 4)
    g = spec.image_size // cell
    bank = rng.random((g, g, cell, cell, spec.channels)).astype(np.float32) - 0.5
    full = bank.transpose(0, 2, 1, 3, 4).reshape(g * cell, g * cell, spec.channels)
    out = np.zeros((spec.image_size, spec.image_size, spec.channels), dtype=np.float32)
    out[: full.shape[0], : full.shape[1]] = full
    return out


def _render_image(label, table, texture, spec, rng):
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    theta, freq = table[label]
    phase = rng.uniform(0.0, 2.0 * np.pi)
    proj = (np.cos(theta) * xx + np.sin(theta) * yy) / s
    img = np.empty((s, s, spec.channels), dtype=np.float32)
    for ch in range(spec.channels):
        img[:, :, ch] = 0.5 + 0.33 * np.sin(2.0 * np.pi * freq * proj + phase + 0.5 * ch)
    img += 0.15 * texture
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def _split(spec, split_id, count, table, texture):
    images = np.empty((count, spec.image_size, spec.image_size, spec.channels), dtype=np.float32)
    labels = np.arange(count, dtype=np.int64) % spec.num_classes
    for i in range(count):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=spec.seed, spawn_key=(split_id, i)))
        )
        images[i] = _render_image(int(labels[i]), table, texture, spec, rng)
    return images, labels


def generate(spec):
    """Deterministic dataset for a spec; labels are balanced to within one."""
    table = variant_class_params(spec.num_classes, spec.variant)
    texture = _texture_bank(spec)
    train_images, train_labels = _split(spec, 0, spec.n_train, table, texture)
    val_images, val_labels = _split(spec, 1, spec.n_val, table, texture)
    return SynthDataset(train_images, train_labels, val_images, val_labels, spec)


# -- raw on-disk format ------------------------------------------------------


def save_raw(images, labels, out_dir):
    """Write images.rimg (u8 pixels, little-endian header) plus labels.csv."""
    imgs = np.asarray(images, dtype=np.float32)
    labs = np.asarray(labels, dtype=np.int64)
    if imgs.ndim != 4 or labs.shape != (imgs.shape[0],):
        raise ValueError(f"need images [n, H, W, C] and n labels, got {imgs.shape} and {labs.shape}")
    os.makedirs(out_dir, exist_ok=True)
    n, h, w, c = imgs.shape
    with open(os.path.join(out_dir, "images.rimg"), "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIII", _VERSION, n, h, w, c))
        f.write(np.round(imgs * 255.0).astype("<u1").tobytes())
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "label"])
        for i, lab in enumerate(labs):
            writer.writerow([i, int(lab)])


def load_raw(in_dir, num_classes=None):
    """Read a raw directory back to (float32 images in [0, 1], int64 labels)."""
    img_path = os.path.join(in_dir, "images.rimg")
    lab_path = os.path.join(in_dir, "labels.csv")
    for path in (img_path, lab_path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing data file: {path}")
    with open(img_path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{img_path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, n, h, w, c = struct.unpack_from("<IIIII", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{img_path}: unsupported version {version}")
    need = 24 + n * h * w * c
    if len(blob) != need:
        raise ValueError(f"{img_path}: expected {need} bytes for {n} images of {h}x{w}x{c}, got {len(blob)}")
    pixels = np.frombuffer(blob, dtype="<u1", offset=24).reshape(n, h, w, c)
    images = (pixels.astype(np.float32) / 255.0).astype(np.float32)

    labels = np.full(n, -1, dtype=np.int64)
    with open(lab_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["index", "label"]:
            raise ValueError(f"{lab_path}: expected header 'index,label', got {header}")
        for row in reader:
            idx, lab = int(row[0]), int(row[1])
            if not 0 <= idx < n:
                raise ValueError(f"{lab_path}: index {idx} out of range for {n} images")
            labels[idx] = lab
    if (labels < 0).any():
        missing = int(np.flatnonzero(labels < 0)[0])
        raise ValueError(f"{lab_path}: no label for image {missing}")
    if num_classes is not None and labels.max() >= num_classes:
        raise ValueError(f"{lab_path}: label {int(labels.max())} out of range for {num_classes} classes")
    return images, labels


# -- augmentation ------------------------------------------------------------


def augment_batch(images, rng, pad=4):
    """Random horizontal flip + random crop from a zero-padded canvas.

    Draw order per batch: flips for all images, then (dy, dx) offsets, so the
    augment stream advances identically for a given batch size.
    """
    imgs = np.asarray(images, dtype=np.float32)
    b, h, w, c = imgs.shape
    flips = rng.random(b) < 0.5
    offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
    canvas = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=np.float32)
    canvas[:, pad : pad + h, pad : pad + w] = imgs
    out = np.empty_like(imgs)
    for i in range(b):
        dy, dx = offs[i]
        crop = canvas[i, dy : dy + h, dx : dx + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out
