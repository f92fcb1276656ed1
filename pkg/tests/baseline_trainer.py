"""A supervised-only trainer with every reconstruction code path deleted.

No masks, no tokenizer, no decoder, no second forward: plain classification
with the same model pieces, sampling, schedule, and update rule, written as
its own loop. The equivalence test trains this and the real trainer (with
the auxiliary objective disabled) from one seed and demands bit-identical
parameters, moments, and losses.
"""

import numpy as np

from comim import autodiff as ad
from comim.data import augment_batch
from comim.encoder import init_encoder_params
from comim.heads import class_logits, init_head_params, sigmoid_ce
from comim.model import clean_pass, decays
from comim.rng import RngStreams


class BaselineTrainer:
    def __init__(self, config, enc_cfg, total_steps):
        self.cfg = config
        self.enc_cfg = enc_cfg
        self.total_steps = total_steps
        self.streams = RngStreams(config.seed)
        self.params = init_encoder_params(enc_cfg, self.streams["init"])
        self.params.update(init_head_params(enc_cfg.dim, config.num_classes, self.streams["init"]))
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step = 0

    def _lr(self):
        cfg = self.cfg
        if self.step < cfg.warmup_steps:
            return float(cfg.peak_lr * self.step / cfg.warmup_steps)
        progress = (self.step - cfg.warmup_steps) / (self.total_steps - cfg.warmup_steps)
        return float(cfg.peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress)))

    def train_step(self, images, labels):
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float32)
        lr = self._lr()
        with ad.Tape():
            pooled = clean_pass(images, self.params, self.enc_cfg)
            loss_t = sigmoid_ce(class_logits(pooled, self.params), labels)
        store = ad.backward(loss_t)
        t = self.step + 1
        b1c = 1.0 - cfg.beta1**t
        b2c = 1.0 - cfg.beta2**t
        for name, p in self.params.items():
            g = store.wrt(p)
            self.m[name] *= cfg.beta1
            self.m[name] += (1.0 - cfg.beta1) * g
            self.v[name] *= cfg.beta2
            self.v[name] += (1.0 - cfg.beta2) * (g * g)
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + cfg.adam_eps)
            if cfg.weight_decay and decays(name):
                update = update + cfg.weight_decay * p.data
            p.data -= lr * update
        self.step += 1
        return float(loss_t.data)

    def run(self, images, labels):
        """Same per-step sampling as the real loop: a fresh draw without
        replacement from the data stream, then augmentation."""
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        n = images.shape[0]
        losses = []
        while self.step < self.total_steps:
            idx = self.streams["data"].choice(n, size=self.cfg.batch_size, replace=False)
            batch = images[idx]
            if self.cfg.augment:
                batch = augment_batch(batch, self.streams["augment"])
            losses.append(self.train_step(batch, labels[idx]))
        return losses
