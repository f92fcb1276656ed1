"""End-to-end workflow through the command-line entry point."""

import json

import pytest

from comim.cli import main


def run_cli(capsys, *argv):
    main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])  # last line is the command's JSON summary


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """synth -> fit -> train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    spec = root / "data_spec.json"
    spec.write_text(json.dumps({"n_train": 48, "n_val": 16, "num_classes": 4,
                                "image_size": 16, "seed": 0}))
    config = root / "run.json"
    config.write_text(json.dumps({
        "encoder": {"image_size": 16, "channels": 3, "patch_size": 8, "dim": 16,
                    "heads": 2, "depth": 1, "mlp_ratio": 2.0},
        "decoder": {"dim": 16, "vocab": 8, "depth": 1, "heads": 2, "mlp_ratio": 2.0},
        "train": {"num_classes": 4, "batch_size": 16, "total_steps": 6,
                  "warmup_steps": 2, "seed": 0},
    }))
    return root


def test_data_synth(workdir, capsys):
    out = run_cli(capsys, "data", "synth", "--spec", str(workdir / "data_spec.json"),
                  "--out", str(workdir / "ds"))
    assert out == {"out": str(workdir / "ds"), "n_train": 48, "n_val": 16,
                   "num_classes": 4}
    assert (workdir / "ds" / "train" / "images.rimg").exists()
    assert (workdir / "ds" / "val" / "labels.csv").exists()


def test_tokenizer_fit(workdir, capsys):
    out = run_cli(capsys, "tokenizer", "fit", "--input", str(workdir / "ds" / "train"),
                  "--vocab", "8", "--iters", "4", "--out", str(workdir / "cb.cdbk"))
    assert out["vocab"] == 8
    assert out["dim"] == 8 * 8 * 3
    assert out["n_patches"] == 48 * 4
    hist = out["objective"]
    assert all(a >= b for a, b in zip(hist, hist[1:]))


def test_train_writes_artifacts(workdir, capsys):
    out = run_cli(capsys, "train", "--config", str(workdir / "run.json"),
                  "--data", str(workdir / "ds" / "train"),
                  "--codebook", str(workdir / "cb.cdbk"),
                  "--out", str(workdir / "run1"))
    assert out["steps"] == 6
    assert out["final_loss"] > 0 and out["final_loss_mim"] > 0
    metrics = [json.loads(l) for l in (workdir / "run1" / "metrics.jsonl").read_text().splitlines()]
    assert [m["step"] for m in metrics] == list(range(6))
    sidecar = json.loads((workdir / "run1" / "run_config.json").read_text())
    assert sidecar["checkpoint"] == str(workdir / "run1" / "checkpoint.ckpt")
    assert sidecar["codebook"] == str(workdir / "cb.cdbk")
    assert sidecar["train"]["total_steps"] == 6


def test_train_without_codebook_exits(workdir, capsys):
    with pytest.raises(SystemExit, match="codebook"):
        run_cli(capsys, "train", "--config", str(workdir / "run.json"),
                "--data", str(workdir / "ds" / "train"),
                "--out", str(workdir / "run2"))


def test_eval_from_sidecar(workdir, capsys):
    out = run_cli(capsys, "eval", "--run-config", str(workdir / "run1" / "run_config.json"),
                  "--query", str(workdir / "ds" / "val"),
                  "--index", str(workdir / "ds" / "train"))
    assert set(out) == {"accuracy", "recall_at_1", "n_query", "n_index", "checkpoint"}
    assert out["n_query"] == 16 and out["n_index"] == 48
    assert 0.0 <= out["accuracy"] <= 1.0
    assert out["checkpoint"] == str(workdir / "run1" / "checkpoint.ckpt")
    # explicit --checkpoint and --metric also work
    out_l2 = run_cli(capsys, "eval", "--run-config", str(workdir / "run1" / "run_config.json"),
                     "--checkpoint", str(workdir / "run1" / "checkpoint.ckpt"),
                     "--query", str(workdir / "ds" / "val"),
                     "--index", str(workdir / "ds" / "train"), "--metric", "l2")
    assert 0.0 <= out_l2["recall_at_1"] <= 1.0


def test_ablate_subcommand(workdir, capsys):
    spec = workdir / "sweep.json"
    spec.write_text(json.dumps({
        "out_dir": str(workdir / "sweep_default"),
        "ratios": [0.2], "depths": [1], "seeds": [0],
        "data": {"n_train": 32, "n_val": 8, "num_classes": 2, "image_size": 16},
        "dim": 16, "enc_depth": 1, "heads": 2, "vocab": 4, "kmeans_iters": 2,
        "batch_size": 16, "total_steps": 4, "warmup_steps": 1,
    }))
    out = run_cli(capsys, "ablate", "loss-mode", "--spec", str(spec),
                  "--out", str(workdir / "sweep1"))
    assert out["sweep"] == "loss-mode"
    assert out["out_dir"] == str(workdir / "sweep1")
    assert (workdir / "sweep1" / "loss_mode.csv").exists()


def test_unknown_sweep_rejected(workdir, capsys):
    with pytest.raises(SystemExit):
        main(["ablate", "bogus", "--spec", "x.json"])
