"""Co-training loop: supervised classification plus masked token reconstruction.

Every step runs a classification forward on clean images and a masked forward
on the same images, then one backward over L = L_ce + lam * L_mim and an
AdamW update with warmup+cosine learning rate. Four named RNG streams (init,
data, mask, augment) keep consumers independent: a run with the MIM branch
disabled draws exactly what a trainer without any MIM code would draw.

With mask_classification=True the classification head reads the pooled
representation of the masked forward, so the encoder runs once per step. The
same shared path is taken when the mask ratio is 0 and MIM is active: an
empty-mask pass is bit-identical to the clean pass, and sharing it keeps the
degenerate configurations exactly equal instead of merely close.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import check_compatible, load_tensors, save_tensors
from .data import augment_batch
from .decoder import mim_loss
from .heads import sigmoid_ce
from .masking import sample_mask
from .model import (build_params, classification_logits, clean_pass, decays,
                    masked_pass, mim_logits)
from .rng import STREAM_NAMES, RngStreams
from .tokenizer import tokenize_batch


class NonFiniteLossError(RuntimeError):
    """A loss or gradient stopped being finite; names the first bad tensor."""


@dataclass
class TrainConfig:
    num_classes: int
    batch_size: int = 64
    epochs: float = None
    total_steps: int = None  # exactly one of epochs / total_steps
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.96
    adam_eps: float = 1e-8
    weight_decay: float = 0.03
    mim_weight: float = 1.0  # lam in L = L_ce + lam * L_mim
    mask_ratio: float = 0.2
    mim_enabled: bool = True
    mim_loss_mode: str = "all"  # or "masked_only"
    mim_fill: str = "gap"  # decoder fill source: 'gap' or 'cls'
    mask_classification: bool = False
    augment: bool = True
    eval_every: int = None
    seed: int = 0

    def __post_init__(self):
        if (self.epochs is None) == (self.total_steps is None):
            raise ValueError("set exactly one of epochs or total_steps")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.mim_loss_mode not in ("all", "masked_only"):
            raise ValueError(f"mim_loss_mode must be 'all' or 'masked_only', got {self.mim_loss_mode!r}")
        if self.mim_fill not in ("gap", "cls"):
            raise ValueError(f"mim_fill must be 'gap' or 'cls', got {self.mim_fill!r}")


@dataclass
class TrainBatch:
    images: np.ndarray  # float32 [B, H, W, C]
    labels: np.ndarray  # int64 [B]
    tokens: np.ndarray = None  # int64 [B, N] when the MIM branch is active


@dataclass
class StepMetrics:
    step: int
    loss_ce: float
    loss_mim: float  # None when the MIM branch did not run
    loss: float
    lr: float

    def json_line(self):
        return json.dumps(
            {"step": self.step, "loss_ce": self.loss_ce, "loss_mim": self.loss_mim,
             "loss": self.loss, "lr": self.lr}
        )


@dataclass
class TrainState:
    config: TrainConfig
    enc_cfg: object
    dec_cfg: object
    params: dict
    m: dict
    v: dict
    streams: RngStreams
    step: int = 0
    total_steps: int = None


def lr_schedule(step, peak_lr, warmup_steps, total_steps):
    """Linear warmup to peak, then cosine to exactly zero at total_steps."""
    if total_steps <= warmup_steps:
        raise ValueError(f"total steps ({total_steps}) must exceed warmup ({warmup_steps})")
    if step < warmup_steps:
        return float(peak_lr * step / warmup_steps)
    t = min(step, total_steps)
    progress = (t - warmup_steps) / (total_steps - warmup_steps)
    return float(peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress)))


def resolve_total_steps(config, n_examples=None):
    if config.total_steps is not None:
        return int(config.total_steps)
    if n_examples is None:
        raise ValueError("epochs-based config needs the dataset size to resolve steps")
    return max(1, int(round(config.epochs * n_examples / config.batch_size)))


def init_train_state(config, enc_cfg, dec_cfg=None, n_examples=None):
    """Fresh parameters, zero moments, and seeded streams for one run."""
    if config.mim_enabled and dec_cfg is None:
        raise ValueError("mim_enabled=True needs a decoder config")
    if config.mim_fill == "cls" and not enc_cfg.use_cls:
        raise ValueError("mim_fill='cls' requires the encoder's [CLS] token")
    streams = RngStreams(config.seed)
    params = build_params(enc_cfg, config.num_classes, streams["init"],
                          dec_cfg=dec_cfg if config.mim_enabled else None)
    m = {name: np.zeros_like(p.data) for name, p in params.items()}
    v = {name: np.zeros_like(p.data) for name, p in params.items()}
    total = resolve_total_steps(config, n_examples) if (
        config.total_steps is not None or n_examples is not None) else None
    if total is not None:
        lr_schedule(0, config.peak_lr, config.warmup_steps, total)  # validates the budget
    return TrainState(config=config, enc_cfg=enc_cfg,
                      dec_cfg=dec_cfg if config.mim_enabled else None,
                      params=params, m=m, v=v, streams=streams, total_steps=total)


def adamw_update(params, grads, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """Bias-corrected Adam step with decoupled decay on weight matrices only."""
    b1c = 1.0 - beta1**t
    b2c = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m[name] *= beta1
        m[name] += (1.0 - beta1) * g
        v[name] *= beta2
        v[name] += (1.0 - beta2) * (g * g)
        update = (m[name] / b1c) / (np.sqrt(v[name] / b2c) + eps)
        if weight_decay and decays(name):
            update = update + weight_decay * p.data
        p.data -= lr * update


def train_step(state, batch):
    """One optimization step; returns the step's metrics.

    Two forward passes share one tape (clean classification + masked
    reconstruction over the same images), followed by a single backward.
    """
    cfg = state.config
    if state.total_steps is None:
        raise ValueError("state has no step budget; pass n_examples or total_steps")
    images = np.asarray(batch.images, dtype=np.float32)
    labels = np.asarray(batch.labels)
    nbatch = images.shape[0]
    n_pos = state.enc_cfg.n_patches
    mim_active = cfg.mim_enabled and cfg.mim_weight > 0
    if mim_active and batch.tokens is None:
        raise ValueError("MIM is active but the batch carries no target tokens")

    lr = lr_schedule(state.step, cfg.peak_lr, cfg.warmup_steps, state.total_steps)

    masks = None
    if cfg.mask_classification or mim_active:
        masks = np.stack([
            sample_mask(n_pos, cfg.mask_ratio, state.streams["mask"],
                        draw_id=state.step * nbatch + i).bits
            for i in range(nbatch)
        ])

    loss_mim_t = None
    with ad.Tape():
        share_forward = cfg.mask_classification or (mim_active and cfg.mask_ratio == 0.0)
        if share_forward:
            patch_out, pooled, fill_vec = masked_pass(
                images, masks, state.params, state.enc_cfg,
                fill=cfg.mim_fill if mim_active else "gap")
        else:
            pooled = clean_pass(images, state.params, state.enc_cfg)
        loss_ce_t = sigmoid_ce(classification_logits(pooled, state.params), labels)

        if mim_active:
            if not share_forward:
                patch_out, _, fill_vec = masked_pass(
                    images, masks, state.params, state.enc_cfg, fill=cfg.mim_fill)
            tok_logits = mim_logits(patch_out, masks, fill_vec, state.params, state.dec_cfg)
            loss_mim_t = mim_loss(tok_logits, batch.tokens, masks, cfg.mim_loss_mode)
            loss_t = ad.add(loss_ce_t, ad.scale(loss_mim_t, cfg.mim_weight))
        else:
            loss_t = loss_ce_t

    loss_ce = float(loss_ce_t.data)
    loss_mim = float(loss_mim_t.data) if loss_mim_t is not None else None
    loss = float(loss_t.data)
    for name, value in (("loss_ce", loss_ce), ("loss_mim", loss_mim), ("loss", loss)):
        if value is not None and not np.isfinite(value):
            raise NonFiniteLossError(f"{name} is non-finite at step {state.step}")

    grad_store = ad.backward(loss_t)
    grads = {}
    for name, p in state.params.items():
        g = grad_store.wrt(p)
        if not np.isfinite(g).all():
            raise NonFiniteLossError(f"gradient of {name} is non-finite at step {state.step}")
        grads[name] = g

    adamw_update(state.params, grads, state.m, state.v, state.step + 1, lr,
                 cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    metrics = StepMetrics(step=state.step, loss_ce=loss_ce, loss_mim=loss_mim,
                          loss=loss, lr=float(lr))
    state.step += 1
    return metrics


def run_training(state, images, labels, codebook=None, metrics_path=None,
                 eval_hook=None, max_steps=None):
    """Drive train_step until the budget is spent; returns all step metrics.

    Per step: draw batch indices (no replacement within a batch) from the
    data stream, augment, tokenize the augmented pixels, step. Tokens are
    recomputed every step because augmentation changes the patches.

    max_steps caps how many steps this call performs without touching the
    schedule budget, so a run can stop for a checkpoint and resume later.
    """
    cfg = state.config
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if state.total_steps is None:
        state.total_steps = resolve_total_steps(cfg, n)
        lr_schedule(0, cfg.peak_lr, cfg.warmup_steps, state.total_steps)
    if cfg.batch_size > n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    mim_active = cfg.mim_enabled and cfg.mim_weight > 0
    if mim_active and codebook is None:
        raise ValueError("MIM is active but no codebook was provided")

    stop = state.total_steps
    if max_steps is not None:
        stop = min(stop, state.step + max_steps)
    out = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        while state.step < stop:
            idx = state.streams["data"].choice(n, size=cfg.batch_size, replace=False)
            batch_images = images[idx]
            if cfg.augment:
                batch_images = augment_batch(batch_images, state.streams["augment"])
            tokens = tokenize_batch(batch_images, state.enc_cfg.patch_size, codebook) if mim_active else None
            metrics = train_step(state, TrainBatch(batch_images, labels[idx], tokens))
            out.append(metrics)
            if sink:
                sink.write(metrics.json_line() + "\n")
            if eval_hook and cfg.eval_every and state.step % cfg.eval_every == 0:
                eval_hook(state)
    finally:
        if sink:
            sink.close()
    return out


def append_run_summary(csv_path, row):
    """Append one run's summary to a CSV, writing the header on first use."""
    exists = os.path.exists(csv_path)
    with open(csv_path, "a", newline="") as f:
        if not exists:
            f.write(",".join(row.keys()) + "\n")
        f.write(",".join(str(v) for v in row.values()) + "\n")


# -- checkpointing -----------------------------------------------------------


def _state_tensors(state):
    tensors = {}
    for name, p in state.params.items():
        tensors[name] = p.data
        tensors[f"opt/m/{name}"] = state.m[name]
        tensors[f"opt/v/{name}"] = state.v[name]
    tensors["meta/step"] = np.asarray(state.step, dtype=np.uint64)
    for sname in STREAM_NAMES:
        tensors[f"rng/{sname}"] = state.streams.state_vector(sname)
    return tensors


def save_checkpoint(state, path):
    save_tensors(path, _state_tensors(state))


def load_checkpoint(state, path):
    """Restore params, moments, step, and RNG streams into `state` in place.

    The checkpoint must carry exactly the tensors this state expects, at the
    same shapes; mismatches raise a CheckpointError naming each offender.
    """
    found = load_tensors(path)
    expected = {name: arr.shape for name, arr in _state_tensors(state).items()}
    check_compatible(path, found, expected)
    for name, p in state.params.items():
        p.data[...] = found[name]
        state.m[name][...] = found[f"opt/m/{name}"]
        state.v[name][...] = found[f"opt/v/{name}"]
    state.step = int(found["meta/step"])
    for sname in STREAM_NAMES:
        state.streams.restore(sname, found[f"rng/{sname}"])
