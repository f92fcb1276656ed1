"""Supervised classification co-trained with masked image modeling on a
shared vision-transformer encoder, on a self-contained reverse-mode autodiff
core. Everything is CPU, float32, and bitwise reproducible from a seed."""

from . import autodiff
from .data import SynthSpec, generate, load_raw, save_raw
from .decoder import DecoderConfig, decode, mim_loss
from .encoder import EncoderConfig, encode, patchify, pool, unpatchify
from .evaluation import accuracy, embed_dataset, knn_recall_at_1
from .masking import Mask, masked_count, sample_mask
from .model import build_params, clean_pass, classification_logits, masked_pass, mim_logits
from .rng import RngStreams
from .tokenizer import Codebook, fit_codebook, load_codebook, save_codebook, tokenize
from .trainer import (NonFiniteLossError, TrainConfig, TrainState,
                      init_train_state, load_checkpoint, run_training,
                      save_checkpoint, train_step)

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "SynthSpec", "generate", "load_raw", "save_raw",
    "DecoderConfig", "decode", "mim_loss",
    "EncoderConfig", "encode", "patchify", "pool", "unpatchify",
    "accuracy", "embed_dataset", "knn_recall_at_1",
    "Mask", "masked_count", "sample_mask",
    "build_params", "clean_pass", "classification_logits", "masked_pass", "mim_logits",
    "RngStreams",
    "Codebook", "fit_codebook", "load_codebook", "save_codebook", "tokenize",
    "NonFiniteLossError", "TrainConfig", "TrainState",
    "init_train_state", "load_checkpoint", "run_training",
    "save_checkpoint", "train_step",
    "__version__",
]
