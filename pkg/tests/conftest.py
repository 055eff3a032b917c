import pytest
import torch

from lsepkit.data import make_shapes_dataset
from lsepkit.trunk import ModelConfig, SiT


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks (run by default)")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(input_channels=3, input_size=8, patch_size=2, depth=3, hidden_dim=16, num_heads=2,
                       num_classes=4, target_depth=2)


@pytest.fixture
def tiny_model(tiny_cfg):
    return SiT(tiny_cfg)


def perturb_adaln(model, std=0.05, seed=1):
    """Fresh adaLN-zero layers are exactly zero; give them small random weights."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "adaLN_modulation" in name or "final_layer.linear" in name:
                p.copy_(torch.randn(p.shape, generator=g) * std)
    return model


@pytest.fixture(scope="session")
def shapes_npz(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "shapes.npz"
    make_shapes_dataset(path, num_classes=10, per_class=20, size=32, seed=0)
    return path


@pytest.fixture(scope="session")
def micro_npz(tmp_path_factory):
    path = tmp_path_factory.mktemp("micro") / "micro.npz"
    make_shapes_dataset(path, num_classes=4, per_class=16, size=8, seed=1)
    return path


def micro_raw(data_path, out_dir, **train):
    """Config dict for a seconds-scale training run on 8x8 images."""
    return {
        "model": {"input_channels": 3, "input_size": 8, "patch_size": 2, "depth": 3, "hidden_dim": 16,
                  "num_heads": 2, "num_classes": 4, "target_depth": 2},
        "probe": {"crop_min": 2, "crop_max": 4, "probe_lr": 0.03},
        "optimizer": {"lr": 1e-3},
        "train": {"batch_size": 8, "total_steps": 20, "ema_decay": 0.9, "log_every": 5, "ckpt_every": 0,
                  "prefetch": 2, **train},
        "data": {"path": str(data_path), "image_size": 8, "channels": 3},
        "seed": 3,
        "output_dir": str(out_dir),
    }


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
