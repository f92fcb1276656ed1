"""Ablation harness: five sweep protocols over the co-training knobs.

Each sweep enumerates cells (one training run each, or two for the staged
protocol), records every finished cell in an append-only JSONL store keyed by
cell name, and rewrites its CSV report plus a JSON sidecar with the exact
per-cell configs. Rerunning a sweep skips finished cells, so an interrupted
grid resumes where it stopped. A run whose loss goes non-finite scores NaN
for that cell; it is logged, not raised.

Desk-scale numbers here make no claim of matching full-scale results; the
full-scale reference values are recorded as header labels in the CSVs.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import SynthSpec, generate
from .decoder import DecoderConfig
from .encoder import EncoderConfig, patchify
from .evaluation import embed_dataset, knn_recall_at_1, predict_classes
from .model import reinit_head
from .tokenizer import fit_codebook
from .trainer import (NonFiniteLossError, TrainConfig, init_train_state,
                      load_checkpoint, run_training, save_checkpoint)

POOLING_CONFIGS = ("gap_gap", "cls_cls", "cls_gap", "gap_cls")  # classification pooling _ decoder fill

REFERENCE_LABELS = {
    "ratio_depth": "full-scale reference (ImageNet-1k, ViT-B/14, not desk-reproducible): "
                   "co-training best +2.01 top-1 over the 79.71 supervised baseline; KNN recall@1 +1.32",
    "pooling": "full-scale reference: best 81.98 top-1 at 5% masking with CLS classification + GAP fill; "
               "CLS-pooled cells reported unstable at intermediate ratios",
    "masked_cls": "full-scale reference: masked classification reaches 80.25 top-1 at 50% masking "
                  "vs the 79.71 unmasked baseline",
    "stages": "full-scale reference: MIM in both stages 83.68 top-1 vs 82.82 with MIM in neither",
    "loss_mode": "full-scale reference: the all-token loss outperforms masked-only at full scale",
}


@dataclass
class SweepSpec:
    out_dir: str
    ratios: tuple = (0.05, 0.2, 0.5, 0.8)
    depths: tuple = (1, 2, 4)
    seeds: tuple = (0, 1, 2)
    data: SynthSpec = field(default_factory=SynthSpec)
    # model shape and train budget shared by every cell
    dim: int = 32
    enc_depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    patch_size: int = 8
    vocab: int = 16
    kmeans_iters: int = 10
    batch_size: int = 32
    total_steps: int = 240
    warmup_steps: int = 40
    peak_lr: float = 1e-3
    mim_weight: float = 1.0

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            raw = json.load(f)
        data = SynthSpec(**raw.pop("data", {}))
        for key in ("ratios", "depths", "seeds"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(data=data, **raw)


class CellStore:
    """Append-only JSONL of finished cells; completed work is never redone."""

    def __init__(self, path):
        self.path = path
        self.cells = {}
        if os.path.exists(path):
            with open(path) as f:
                for line in f:
                    if line.strip():
                        rec = json.loads(line)
                        self.cells[rec["key"]] = rec

    def done(self, key):
        return key in self.cells

    def values(self, key):
        return self.cells[key]["values"]

    def record(self, key, config, values):
        if key in self.cells:
            return  # never overwrite a completed cell
        rec = {"key": key, "config": config, "values": values}
        with open(self.path, "a") as f:
            f.write(json.dumps(rec) + "\n")
        self.cells[key] = rec


class Workspace:
    """Datasets and frozen codebooks shared by every cell of a sweep."""

    def __init__(self, spec):
        self.spec = spec
        self._datasets = {}
        self._codebooks = {}

    def dataset(self, variant):
        if variant not in self._datasets:
            self._datasets[variant] = generate(dataclasses.replace(self.spec.data, variant=variant))
        return self._datasets[variant]

    def codebook(self, variant):
        """One codebook per variant, fitted on raw train patches with a fixed
        derived seed: frozen tokenizer, identical across every cell."""
        if variant not in self._codebooks:
            ds = self.dataset(variant)
            patches = patchify(ds.train_images, self.spec.patch_size)
            flat = patches.reshape(-1, patches.shape[-1])
            cb, _ = fit_codebook(flat, self.spec.vocab, self.spec.kmeans_iters,
                                 seed=self.spec.data.seed * 1000 + 7)
            self._codebooks[variant] = cb
        return self._codebooks[variant]


def cell_config(spec, *, seed, variant="a", mask_ratio=0.2, dec_depth=1, mim_enabled=True,
                pooling="gap", mim_fill="gap", mask_classification=False, mim_loss_mode="all"):
    """Self-contained JSON-serializable config for one training run."""
    return {
        "data": dataclasses.asdict(dataclasses.replace(spec.data, variant=variant)),
        "encoder": {
            "image_size": spec.data.image_size, "channels": spec.data.channels,
            "patch_size": spec.patch_size, "dim": spec.dim, "depth": spec.enc_depth,
            "heads": spec.heads, "mlp_ratio": spec.mlp_ratio, "pooling": pooling,
            "use_cls": pooling == "cls" or mim_fill == "cls",
        },
        "decoder": {
            "dim": spec.dim, "vocab": spec.vocab, "depth": dec_depth,
            "heads": spec.heads, "mlp_ratio": spec.mlp_ratio,
        },
        "train": {
            "num_classes": spec.data.num_classes, "batch_size": spec.batch_size,
            "total_steps": spec.total_steps, "warmup_steps": spec.warmup_steps,
            "peak_lr": spec.peak_lr, "mim_weight": spec.mim_weight,
            "mask_ratio": mask_ratio, "mim_enabled": mim_enabled,
            "mim_loss_mode": mim_loss_mode, "mim_fill": mim_fill,
            "mask_classification": mask_classification, "seed": seed,
        },
        "kmeans": {"vocab": spec.vocab, "iters": spec.kmeans_iters,
                   "seed": spec.data.seed * 1000 + 7},
    }


def _configs_from_cell(config):
    enc = EncoderConfig(**config["encoder"])
    dec = DecoderConfig(n_positions=enc.n_patches, **config["decoder"])
    train = TrainConfig(**config["train"])
    return enc, dec, train


def evaluate_state(state, dataset):
    """Accuracy on the validation split plus KNN recall (val queries, train index)."""
    emb_val = embed_dataset(dataset.val_images, dataset.val_labels, state.params, state.enc_cfg)
    emb_train = embed_dataset(dataset.train_images, dataset.train_labels, state.params, state.enc_cfg)
    acc = float((predict_classes(emb_val, state.params) == emb_val.labels).mean())
    recall = knn_recall_at_1(emb_val, emb_train)
    return {"accuracy": acc, "recall_at_1": recall,
            "n_query": int(emb_val.vectors.shape[0]), "n_index": int(emb_train.vectors.shape[0])}


def run_cell(config, workspace=None):
    """Train + evaluate one cell from its recorded config; NaN values on divergence."""
    enc, dec, train_cfg = _configs_from_cell(config)
    if workspace is not None:
        ds = workspace.dataset(config["data"]["variant"])
        codebook = workspace.codebook(config["data"]["variant"]) if train_cfg.mim_enabled else None
    else:
        ds = generate(SynthSpec(**config["data"]))
        codebook = None
        if train_cfg.mim_enabled:
            patches = patchify(ds.train_images, enc.patch_size)
            codebook, _ = fit_codebook(patches.reshape(-1, patches.shape[-1]),
                                       config["kmeans"]["vocab"], config["kmeans"]["iters"],
                                       seed=config["kmeans"]["seed"])
    state = init_train_state(train_cfg, enc, dec if train_cfg.mim_enabled else None,
                             n_examples=ds.train_images.shape[0])
    try:
        metrics = run_training(state, ds.train_images, ds.train_labels, codebook=codebook)
    except NonFiniteLossError as exc:
        return {"accuracy": math.nan, "recall_at_1": math.nan, "diverged": True,
                "reason": str(exc)}
    values = evaluate_state(state, ds)
    values["final_loss"] = metrics[-1].loss
    values["diverged"] = False
    return values


def _run_cells(store, workspace, cells, log=print):
    """cells: list of (key, config); runs the missing ones."""
    for key, config in cells:
        if store.done(key):
            continue
        values = run_cell(config, workspace)
        if values.get("diverged"):
            log(f"[ablate] {key}: diverged -> NaN ({values.get('reason', '')})")
        else:
            log(f"[ablate] {key}: acc={values['accuracy']:.4f} r@1={values['recall_at_1']:.4f}")
        store.record(key, config, values)


def _agg(values):
    """(mean, std, n) with NaN propagation: a diverged seed poisons its cell."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std()), arr.size


def _write_csv(path, reference, header, rows):
    with open(path, "w", newline="") as f:
        f.write(f"# {reference}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _write_sidecar(path, store, keys):
    with open(path, "w") as f:
        json.dump({k: store.cells[k] for k in keys}, f, indent=1, sort_keys=True)
    return path


# -- protocol 1: masking ratio x decoder depth, deltas vs no-MIM baseline ----


def run_ratio_depth(spec):
    os.makedirs(spec.out_dir, exist_ok=True)
    store = CellStore(os.path.join(spec.out_dir, "ratio_depth_cells.jsonl"))
    ws = Workspace(spec)

    cells = []
    for s in spec.seeds:
        cells.append((f"baseline|seed={s}", cell_config(spec, seed=s, mim_enabled=False)))
    for r in spec.ratios:
        for d in spec.depths:
            for s in spec.seeds:
                cells.append((f"ratio={r}|depth={d}|seed={s}",
                              cell_config(spec, seed=s, mask_ratio=r, dec_depth=d)))
    _run_cells(store, ws, cells)

    def delta_rows(metric):
        rows = []
        for r in spec.ratios:
            means, stds = [], []
            for d in spec.depths:
                deltas = [store.values(f"ratio={r}|depth={d}|seed={s}")[metric]
                          - store.values(f"baseline|seed={s}")[metric] for s in spec.seeds]
                mu, sd, _ = _agg(deltas)
                means.append(mu)
                stds.append(sd)
            rows.append([r, *means, *stds, len(spec.seeds)])
        return rows

    header = ["ratio"] + [f"depth{d}_mean" for d in spec.depths] + \
             [f"depth{d}_std" for d in spec.depths] + ["n"]
    paths = {
        "accuracy_csv": _write_csv(os.path.join(spec.out_dir, "ratio_depth_delta_accuracy.csv"),
                                   REFERENCE_LABELS["ratio_depth"], header, delta_rows("accuracy")),
        "recall_csv": _write_csv(os.path.join(spec.out_dir, "ratio_depth_delta_recall.csv"),
                                 REFERENCE_LABELS["ratio_depth"], header, delta_rows("recall_at_1")),
        "sidecar": _write_sidecar(os.path.join(spec.out_dir, "ratio_depth_cells.json"),
                                  store, [k for k, _ in cells]),
    }
    return paths


# -- protocol 2: pooling / fill configurations -------------------------------


def run_pooling(spec):
    os.makedirs(spec.out_dir, exist_ok=True)
    store = CellStore(os.path.join(spec.out_dir, "pooling_cells.jsonl"))
    ws = Workspace(spec)
    depth = spec.depths[0]

    cells = []
    for name in POOLING_CONFIGS:
        pooling, fill = name.split("_")
        for r in spec.ratios:
            for s in spec.seeds:
                cells.append((f"config={name}|ratio={r}|seed={s}",
                              cell_config(spec, seed=s, mask_ratio=r, dec_depth=depth,
                                          pooling=pooling, mim_fill=fill)))
    _run_cells(store, ws, cells)

    rows = []
    for r in spec.ratios:
        row = [r]
        for name in POOLING_CONFIGS:
            mu, sd, _ = _agg([store.values(f"config={name}|ratio={r}|seed={s}")["accuracy"]
                              for s in spec.seeds])
            row += [mu, sd]
        rows.append(row + [len(spec.seeds)])
    header = ["ratio"] + [f"{name}_{suffix}" for name in POOLING_CONFIGS
                          for suffix in ("mean", "std")] + ["n"]
    return {
        "accuracy_csv": _write_csv(os.path.join(spec.out_dir, "pooling_accuracy.csv"),
                                   REFERENCE_LABELS["pooling"], header, rows),
        "sidecar": _write_sidecar(os.path.join(spec.out_dir, "pooling_cells.json"),
                                  store, [k for k, _ in cells]),
    }


# -- protocol 3: masked classification ----------------------------------------


def run_masked_cls(spec):
    os.makedirs(spec.out_dir, exist_ok=True)
    store = CellStore(os.path.join(spec.out_dir, "masked_cls_cells.jsonl"))
    ws = Workspace(spec)
    depth = spec.depths[0]

    cells = []
    for s in spec.seeds:
        cells.append((f"unmasked|seed={s}", cell_config(spec, seed=s, mim_enabled=False)))
    for r in spec.ratios:
        for s in spec.seeds:
            cells.append((f"masked_mim|ratio={r}|seed={s}",
                          cell_config(spec, seed=s, mask_ratio=r, dec_depth=depth,
                                      mask_classification=True)))
            cells.append((f"masked_only|ratio={r}|seed={s}",
                          cell_config(spec, seed=s, mask_ratio=r, mim_enabled=False,
                                      mask_classification=True)))
    _run_cells(store, ws, cells)

    base_mu, base_sd, _ = _agg([store.values(f"unmasked|seed={s}")["accuracy"] for s in spec.seeds])
    rows = []
    for r in spec.ratios:
        mim_mu, mim_sd, _ = _agg([store.values(f"masked_mim|ratio={r}|seed={s}")["accuracy"]
                                  for s in spec.seeds])
        only_mu, only_sd, _ = _agg([store.values(f"masked_only|ratio={r}|seed={s}")["accuracy"]
                                    for s in spec.seeds])
        rows.append([r, mim_mu, mim_sd, only_mu, only_sd, base_mu, base_sd, len(spec.seeds)])
    header = ["ratio", "masked_mim_mean", "masked_mim_std", "masked_only_mean",
              "masked_only_std", "unmasked_mean", "unmasked_std", "n"]
    return {
        "accuracy_csv": _write_csv(os.path.join(spec.out_dir, "masked_cls_accuracy.csv"),
                                   REFERENCE_LABELS["masked_cls"], header, rows),
        "sidecar": _write_sidecar(os.path.join(spec.out_dir, "masked_cls_cells.json"),
                                  store, [k for k, _ in cells]),
    }


# -- protocol 4: MIM on/off across pretrain and finetune stages ---------------


def run_stages(spec):
    """2x2 stage grid: pretrain on variant a, finetune on variant b with a
    fresh classifier head. Pretrain runs are shared across finetune toggles."""
    os.makedirs(spec.out_dir, exist_ok=True)
    store = CellStore(os.path.join(spec.out_dir, "stages_cells.jsonl"))
    ws = Workspace(spec)
    depth = spec.depths[0]

    def pretrain_ckpt(pre_mim, seed):
        path = os.path.join(spec.out_dir, f"pretrain_mim{int(pre_mim)}_seed{seed}.ckpt")
        if not os.path.exists(path):
            config = cell_config(spec, seed=seed, variant="a", dec_depth=depth, mim_enabled=pre_mim)
            enc, dec, train_cfg = _configs_from_cell(config)
            ds = ws.dataset("a")
            state = init_train_state(train_cfg, enc, dec if pre_mim else None,
                                     n_examples=ds.train_images.shape[0])
            run_training(state, ds.train_images, ds.train_labels,
                         codebook=ws.codebook("a") if pre_mim else None)
            save_checkpoint(state, path)
        return path

    keys = []
    for pre_mim in (True, False):
        for ft_mim in (True, False):
            for s in spec.seeds:
                key = f"pre={int(pre_mim)}|ft={int(ft_mim)}|seed={s}"
                keys.append(key)
                if store.done(key):
                    continue
                ckpt = pretrain_ckpt(pre_mim, s)
                pre_config = cell_config(spec, seed=s, variant="a", dec_depth=depth,
                                         mim_enabled=pre_mim)
                ft_config = cell_config(spec, seed=s, variant="b", dec_depth=depth,
                                        mim_enabled=ft_mim)
                values = _finetune_from(pre_config, ckpt, ft_config, ws)
                if values.get("diverged"):
                    print(f"[ablate] {key}: diverged -> NaN")
                else:
                    print(f"[ablate] {key}: acc={values['accuracy']:.4f} r@1={values['recall_at_1']:.4f}")
                store.record(key, {"pretrain": pre_config, "finetune": ft_config}, values)

    rows = []
    for pre_mim in (True, False):
        for ft_mim in (True, False):
            acc_mu, acc_sd, n = _agg([store.values(f"pre={int(pre_mim)}|ft={int(ft_mim)}|seed={s}")["accuracy"]
                                      for s in spec.seeds])
            rec_mu, rec_sd, _ = _agg([store.values(f"pre={int(pre_mim)}|ft={int(ft_mim)}|seed={s}")["recall_at_1"]
                                      for s in spec.seeds])
            rows.append([int(pre_mim), int(ft_mim), acc_mu, acc_sd, rec_mu, rec_sd, n])
    header = ["pretrain_mim", "finetune_mim", "accuracy_mean", "accuracy_std",
              "recall_mean", "recall_std", "n"]
    return {
        "csv": _write_csv(os.path.join(spec.out_dir, "stages.csv"),
                          REFERENCE_LABELS["stages"], header, rows),
        "sidecar": _write_sidecar(os.path.join(spec.out_dir, "stages_cells.json"), store, keys),
    }


def _finetune_from(pre_config, ckpt_path, ft_config, workspace):
    """Load pretrained weights, swap in a fresh head, train on the new variant."""
    pre_enc, pre_dec, pre_train = _configs_from_cell(pre_config)
    pre_state = init_train_state(pre_train, pre_enc, pre_dec if pre_train.mim_enabled else None,
                                 n_examples=workspace.dataset("a").train_images.shape[0])
    load_checkpoint(pre_state, ckpt_path)

    enc, dec, train_cfg = _configs_from_cell(ft_config)
    ds = workspace.dataset("b")
    state = init_train_state(train_cfg, enc, dec if train_cfg.mim_enabled else None,
                             n_examples=ds.train_images.shape[0])
    # carry over everything that exists in both registries except the head;
    # the decoder transfers only when the pretrain stage had one
    for name, p in state.params.items():
        if name.startswith("head/"):
            continue
        if name in pre_state.params and pre_state.params[name].data.shape == p.data.shape:
            p.data[...] = pre_state.params[name].data
    reinit_head(state.params, enc.dim, train_cfg.num_classes, state.streams["init"])
    try:
        metrics = run_training(state, ds.train_images, ds.train_labels,
                               codebook=workspace.codebook("b") if train_cfg.mim_enabled else None)
    except NonFiniteLossError as exc:
        return {"accuracy": math.nan, "recall_at_1": math.nan, "diverged": True, "reason": str(exc)}
    values = evaluate_state(state, ds)
    values["final_loss"] = metrics[-1].loss
    values["diverged"] = False
    return values


# -- protocol 5: loss over all tokens vs masked positions only ----------------


def run_loss_mode(spec):
    os.makedirs(spec.out_dir, exist_ok=True)
    store = CellStore(os.path.join(spec.out_dir, "loss_mode_cells.jsonl"))
    ws = Workspace(spec)
    depth = spec.depths[0]

    cells = []
    for r in spec.ratios:
        for s in spec.seeds:
            for mode in ("all", "masked_only"):
                cells.append((f"mode={mode}|ratio={r}|seed={s}",
                              cell_config(spec, seed=s, mask_ratio=r, dec_depth=depth,
                                          mim_loss_mode=mode)))
    _run_cells(store, ws, cells)

    rows = []
    for r in spec.ratios:
        for mode in ("all", "masked_only"):
            for s in spec.seeds:  # paired per-run rows: same seed -> same mask draws
                vals = store.values(f"mode={mode}|ratio={r}|seed={s}")
                rows.append([r, mode, s, vals["accuracy"], vals["recall_at_1"]])
    header = ["ratio", "mode", "seed", "accuracy", "recall_at_1"]
    return {
        "csv": _write_csv(os.path.join(spec.out_dir, "loss_mode.csv"),
                          REFERENCE_LABELS["loss_mode"], header, rows),
        "sidecar": _write_sidecar(os.path.join(spec.out_dir, "loss_mode_cells.json"),
                                  store, [k for k, _ in cells]),
    }


SWEEPS = {
    "ratio-depth": run_ratio_depth,
    "pooling": run_pooling,
    "masked-cls": run_masked_cls,
    "stages": run_stages,
    "loss-mode": run_loss_mode,
}
