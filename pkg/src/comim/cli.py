"""Command-line entry points.

Subcommands cover the full workflow: synthesize a dataset, fit the frozen
patch tokenizer, train with the co-training objective, evaluate a checkpoint,
and drive the ablation sweeps. Training writes a `run_config.json` sidecar so
that evaluation can rebuild the exact model shape without repeating flags.
"""

import argparse
import json
import os

from .ablations import SWEEPS, SweepSpec
from .data import SynthSpec, generate, load_raw, save_raw
from .decoder import DecoderConfig
from .encoder import EncoderConfig, patchify
from .evaluation import embed_dataset, knn_recall_at_1, predict_classes
from .tokenizer import fit_codebook, load_codebook, save_codebook
from .trainer import (TrainConfig, init_train_state, load_checkpoint,
                      run_training, save_checkpoint)


def _cmd_data_synth(args):
    with open(args.spec) as f:
        spec = SynthSpec(**json.load(f))
    ds = generate(spec)
    save_raw(ds.train_images, ds.train_labels, os.path.join(args.out, "train"))
    save_raw(ds.val_images, ds.val_labels, os.path.join(args.out, "val"))
    print(json.dumps({"out": args.out, "n_train": int(ds.train_images.shape[0]),
                      "n_val": int(ds.val_images.shape[0]),
                      "num_classes": spec.num_classes}))


def _cmd_tokenizer_fit(args):
    images, _ = load_raw(args.input)
    patches = patchify(images, args.patch_size)
    flat = patches.reshape(-1, patches.shape[-1])
    codebook, history = fit_codebook(flat, args.vocab, args.iters, seed=args.seed)
    save_codebook(codebook, args.out)
    print(json.dumps({"out": args.out, "vocab": codebook.vocab, "dim": codebook.dim,
                      "n_patches": int(flat.shape[0]),
                      "objective": [float(h) for h in history]}))


def _load_run_config(path):
    with open(path) as f:
        raw = json.load(f)
    enc = EncoderConfig(**raw["encoder"])
    train_cfg = TrainConfig(**raw["train"])
    dec = None
    if train_cfg.mim_enabled:
        dec = DecoderConfig(n_positions=enc.n_patches, **raw["decoder"])
    return raw, enc, dec, train_cfg


def _cmd_train(args):
    raw, enc, dec, train_cfg = _load_run_config(args.config)
    images, labels = load_raw(args.data, num_classes=train_cfg.num_classes)
    codebook = None
    if train_cfg.mim_enabled and train_cfg.mim_weight > 0:
        if args.codebook is None:
            raise SystemExit("train: MIM is active, pass --codebook")
        codebook = load_codebook(args.codebook)
    os.makedirs(args.out, exist_ok=True)
    state = init_train_state(train_cfg, enc, dec, n_examples=images.shape[0])
    metrics = run_training(state, images, labels, codebook=codebook,
                           metrics_path=os.path.join(args.out, "metrics.jsonl"))
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    save_checkpoint(state, ckpt)
    sidecar = dict(raw)
    sidecar["checkpoint"] = ckpt
    sidecar["codebook"] = args.codebook
    with open(os.path.join(args.out, "run_config.json"), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
    last = metrics[-1]
    print(json.dumps({"steps": state.step, "final_loss": last.loss,
                      "final_loss_ce": last.loss_ce, "final_loss_mim": last.loss_mim,
                      "checkpoint": ckpt}))


def _cmd_eval(args):
    raw, enc, dec, train_cfg = _load_run_config(args.run_config)
    ckpt = args.checkpoint or raw.get("checkpoint")
    if not ckpt:
        raise SystemExit("eval: no checkpoint given and run config records none")
    query_images, query_labels = load_raw(args.query, num_classes=train_cfg.num_classes)
    index_images, index_labels = load_raw(args.index, num_classes=train_cfg.num_classes)
    state = init_train_state(train_cfg, enc, dec, n_examples=index_images.shape[0])
    load_checkpoint(state, ckpt)
    emb_query = embed_dataset(query_images, query_labels, state.params, enc)
    emb_index = embed_dataset(index_images, index_labels, state.params, enc)
    acc = float((predict_classes(emb_query, state.params) == emb_query.labels).mean())
    print(json.dumps({"accuracy": acc,
                      "recall_at_1": knn_recall_at_1(emb_query, emb_index, metric=args.metric),
                      "n_query": int(emb_query.vectors.shape[0]),
                      "n_index": int(emb_index.vectors.shape[0]),
                      "checkpoint": ckpt}))


def _cmd_ablate(args):
    spec = SweepSpec.from_json(args.spec)
    if args.out:
        spec.out_dir = args.out
    paths = SWEEPS[args.sweep](spec)
    print(json.dumps({"sweep": args.sweep, "out_dir": spec.out_dir, "files": paths}))


def build_parser():
    p = argparse.ArgumentParser(prog="comim",
                                description="masked-image-modeling co-training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="dataset tools").add_subparsers(dest="sub", required=True)
    synth = data.add_parser("synth", help="render a synthetic grating dataset")
    synth.add_argument("--spec", required=True, help="JSON file of dataset fields")
    synth.add_argument("--out", required=True, help="output directory (train/ and val/)")
    synth.set_defaults(func=_cmd_data_synth)

    tok = sub.add_parser("tokenizer", help="patch tokenizer tools").add_subparsers(dest="sub", required=True)
    fit = tok.add_parser("fit", help="fit a k-means codebook on raw patches")
    fit.add_argument("--input", required=True, help="dataset directory (images.rimg + labels.csv)")
    fit.add_argument("--patch-size", type=int, default=8)
    fit.add_argument("--vocab", type=int, required=True)
    fit.add_argument("--iters", type=int, required=True)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", required=True, help="codebook file to write")
    fit.set_defaults(func=_cmd_tokenizer_fit)

    train = sub.add_parser("train", help="run one training job")
    train.add_argument("--config", required=True,
                       help='JSON with "encoder", "decoder", "train" sections')
    train.add_argument("--data", required=True, help="training dataset directory")
    train.add_argument("--codebook", help="fitted codebook (required when MIM is active)")
    train.add_argument("--out", required=True, help="output directory for checkpoint + metrics")
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--run-config", required=True, help="run_config.json from training")
    ev.add_argument("--checkpoint", help="checkpoint path (default: the one in the run config)")
    ev.add_argument("--query", required=True, help="query dataset directory (accuracy + KNN queries)")
    ev.add_argument("--index", required=True, help="index dataset directory (KNN neighbors)")
    ev.add_argument("--metric", choices=("cosine", "l2"), default="cosine")
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="run one ablation sweep")
    ab.add_argument("sweep", choices=sorted(SWEEPS))
    ab.add_argument("--spec", required=True, help="JSON file of SweepSpec fields")
    ab.add_argument("--out", help="override the spec's output directory")
    ab.set_defaults(func=_cmd_ablate)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
