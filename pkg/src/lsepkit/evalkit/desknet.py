"""Small supervised CNN used as the desk-scale FID-proxy extractor and REPA feature provider."""

from __future__ import annotations

import json

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, safe_open, save_file

from .frechet import FrechetStats, frechet_distance, stats_from_features


class DeskEncoder(nn.Module):
    def __init__(self, in_channels: int = 3, num_classes: int = 10, width: int = 64):
        super().__init__()
        self.hparams = {"in_channels": in_channels, "num_classes": num_classes, "width": width}
        w = width
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, padding=1), nn.GroupNorm(8, w), nn.SiLU(),
            nn.Conv2d(w, w, 3, padding=1, stride=2), nn.GroupNorm(8, w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.GroupNorm(8, 2 * w), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1, stride=2), nn.GroupNorm(8, 2 * w), nn.SiLU(),
        )
        self.head = nn.Linear(2 * w, num_classes)

    @property
    def feat_dim(self) -> int:
        return 2 * self.hparams["width"]

    def feature_map(self, x):
        return self.body(x)

    def features(self, x):
        return self.feature_map(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))


def train_desk_encoder(images, labels, num_classes: int, epochs: int = 5, lr: float = 2e-3, batch_size: int = 128,
                       seed: int = 0, width: int = 64) -> DeskEncoder:
    torch.manual_seed(seed)
    images = torch.as_tensor(images).float()
    labels = torch.as_tensor(labels).long()
    net = DeskEncoder(images.shape[1], num_classes, width)
    opt = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=1e-4)
    gen = torch.Generator().manual_seed(seed)
    net.train()
    for _ in range(epochs):
        perm = torch.randperm(len(images), generator=gen)
        for s in range(0, len(images), batch_size):
            idx = perm[s:s + batch_size]
            loss = F.cross_entropy(net(images[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return net.eval()


def save_desk_encoder(net: DeskEncoder, path):
    save_file({k: v.contiguous() for k, v in net.state_dict().items()}, str(path),
              metadata={"format": "lsepkit.deskencoder/1", "hparams": json.dumps(net.hparams)})


def load_desk_encoder(path) -> DeskEncoder:
    with safe_open(str(path), framework="pt") as f:
        hp = json.loads(f.metadata()["hparams"])
    net = DeskEncoder(**hp)
    net.load_state_dict(load_file(str(path)))
    return net.eval()


@torch.no_grad()
def encode(net: DeskEncoder, images, batch_size: int = 512) -> np.ndarray:
    images = torch.as_tensor(images).float()
    return torch.cat([net.features(images[s:s + batch_size]) for s in range(0, len(images), batch_size)]).numpy()


def fid_proxy(net: DeskEncoder, real, generated) -> float:
    """Fréchet distance between desk-encoder statistics of two image sets."""
    return frechet_distance(stats_from_features(encode(net, real)), stats_from_features(encode(net, generated)))


def fid_proxy_from_stats(net: DeskEncoder, real_stats: FrechetStats, generated) -> float:
    return frechet_distance(real_stats, stats_from_features(encode(net, generated)))
