import json

import numpy as np
import pytest
import yaml
from PIL import Image

from lsepkit.cli import main
from lsepkit.repa import PrecomputedProvider

from conftest import micro_raw


@pytest.fixture
def workspace(tmp_path):
    assert main(["make-dataset", "--out", str(tmp_path / "data.npz"), "--classes", "4", "--per-class", "16",
                 "--size", "8", "--seed", "0"]) == 0
    raw = micro_raw("data.npz", tmp_path / "run", total_steps=10)
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump(raw))
    return tmp_path, cfg


def test_cli_end_to_end(workspace, capsys):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--seed", "3"]) == 0
    ckpt = root / "run" / "last.safetensors"
    assert ckpt.exists() and (root / "run" / "metrics.jsonl").exists()

    assert main(["resume", "--config", str(cfg), "--seed", "3", "--checkpoint", str(ckpt), "--steps", "15"]) == 0
    resumed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert resumed["step"] == 15

    out = root / "s" / "grid.png"
    assert main(["sample", "--config", str(cfg), "--seed", "3", "--checkpoint", str(ckpt), "--num", "6",
                 "--sample-steps", "4", "--cfg-weight", "1.5", "--interval", "0", "0.7", "--out", str(out)]) == 0
    assert Image.open(out).size == (8 * 8, 8)
    manifest = json.loads(out.with_suffix(".json").read_text())
    assert manifest["spec"]["cfg_weight"] == 1.5 and len(manifest["checkpoint_sha256"]) == 64

    probe = root / "p" / "probe"
    assert main(["probe", "--config", str(cfg), "--seed", "0", "--checkpoint", str(ckpt), "--layers", "1", "2",
                 "--times", "0.1", "--epochs", "2", "--out", str(probe)]) == 0
    assert len(probe.with_suffix(".jsonl").read_text().splitlines()) == 2

    assert main(["fid", "--config", str(cfg), "--seed", "0", "--checkpoint", str(ckpt), "--num", "16",
                 "--sample-steps", "3", "--encoder-epochs", "1"]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["fid_proxy"] >= 0
    assert (root / "run" / "desk_encoder.safetensors").exists()

    viz = root / "viz"
    assert main(["viz", "--config", str(cfg), "--seed", "0", "--checkpoint", str(ckpt), "--times", "0.4",
                 "--epochs", "2", "--pooling", "none", "--out", str(viz)]) == 0
    table = np.loadtxt(viz / "pca_layer2_t0.4.csv", delimiter=",", skiprows=1)
    assert table.shape == (64 * 16, 4)
    assert (viz / "probe_curves.csv").exists()

    feats = root / "feats.safetensors"
    assert main(["export-features", "--config", str(cfg), "--seed", "3", "--out", str(feats),
                 "--encoder-epochs", "1"]) == 0
    provider = PrecomputedProvider(feats, num_tokens=16)
    assert provider.descriptor.feat_dim == 128


def test_cli_digest_mismatch_exit_code(workspace):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--seed", "3"]) == 0
    ckpt = root / "run" / "last.safetensors"
    raw = yaml.safe_load(cfg.read_text())
    raw["train"]["rho_D"] = 0.3
    other = root / "other.yaml"
    other.write_text(yaml.safe_dump(raw))
    args = ["sample", "--config", str(other), "--seed", "4", "--checkpoint", str(ckpt), "--num", "2",
            "--sample-steps", "2", "--out", str(root / "x.png")]
    assert main(args) == 2
    assert main(args + ["--allow-mismatch"]) == 0


def test_cli_train_with_feature_file(workspace):
    root, cfg = workspace
    feats = root / "feats.safetensors"
    assert main(["export-features", "--config", str(cfg), "--out", str(feats), "--encoder-epochs", "1"]) == 0
    raw = yaml.safe_load(cfg.read_text())
    raw["repa"] = {"enabled": True, "provider": "file", "feature_file": str(feats), "head_width": 16}
    raw["train"]["total_steps"] = 4
    cfg2 = root / "cfg2.yaml"
    cfg2.write_text(yaml.safe_dump(raw))
    assert main(["train", "--config", str(cfg2)]) == 0
