"""Frozen-model linear probing across layers and noise levels."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .. import flowcore
from ..errors import ValidationError
from ..lsep import ProbeHead


def per_sample_noise(shape, index: int, seed: int, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed * 1_000_003 + index)
    return torch.randn(shape, generator=gen, dtype=dtype)


@torch.no_grad()
def extract_features(model, images, layers, t: float, pooling: str = "global_mean", seed: int = 0,
                     batch_size: int = 256, ids=None):
    """Noise each sample to level t with its own seed, run the trunk with null labels, pool.

    ``layers`` is an int or a sequence of 1-based block indices. Returns a dict
    layer -> array of shape (count, hidden_dim) for ``global_mean`` or
    (count, T, hidden_dim) for ``none``.
    """
    if pooling not in ("global_mean", "none"):
        raise ValidationError(f"pooling must be 'global_mean' or 'none', got {pooling!r}")
    single = isinstance(layers, int)
    layers = [layers] if single else list(layers)
    depth = model.config.depth
    for k in layers:
        if not 1 <= k <= depth:
            raise ValidationError(f"layer {k} outside [1, {depth}]")
    was_training = model.training
    model.eval()
    images = torch.as_tensor(images)
    ids = list(range(len(images))) if ids is None else list(ids)
    out = {k: [] for k in layers}
    null = model.config.null_label_id
    top = max(layers)
    for start in range(0, len(images), batch_size):
        x0 = images[start:start + batch_size].float()
        eps = torch.stack([per_sample_noise(x0.shape[1:], i, seed) for i in ids[start:start + len(x0)]])
        tt = torch.full((len(x0),), float(t))
        noisy = flowcore.forward_noising(x0, eps, tt)
        record = []
        model.forward_to_depth(noisy.x_t, tt, torch.full((len(x0),), null, dtype=torch.long), top, record=record)
        for k in layers:
            tok = record[k - 1]
            out[k].append(tok.mean(dim=1) if pooling == "global_mean" else tok)
    model.train(was_training)
    result = {k: torch.cat(v).numpy() for k, v in out.items()}
    return result[layers[0]] if single else result


@dataclass
class ProbeFit:
    accuracy: float
    train_accuracy: float
    final_loss: float


def split_indices(count: int, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(count)
    n_val = int(round(count * val_fraction))
    return perm[n_val:], perm[:n_val]


def train_linear_probe(features, labels, split=None, epochs: int = 50, lr: float = 1e-2,
                       seed: int = 0, batch_size: int = 256, num_classes: int | None = None,
                       weight_decay: float = 0.0) -> ProbeFit:
    """Train LayerNorm + linear on frozen features; report validation accuracy.

    ``split`` is (train_idx, val_idx) or a validation fraction (default 0.2).
    """
    x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if x.dim() != 2 or len(x) != len(y):
        raise ValidationError("features must be (count, dim) with one label per row")
    if split is None or isinstance(split, float):
        train_idx, val_idx = split_indices(len(x), 0.2 if split is None else split, seed)
    else:
        train_idx, val_idx = (np.asarray(s) for s in split)
    if np.intersect1d(train_idx, val_idx).size:
        raise ValidationError("train and validation splits overlap")
    if len(val_idx) == 0:
        raise ValidationError("empty validation split")
    if torch.unique(y[train_idx]).numel() < 2:
        raise ValidationError("training split contains a single class")
    C = num_classes or int(y.max()) + 1
    torch.manual_seed(seed)
    head = ProbeHead(x.shape[1], C)
    opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    xt, yt = x[train_idx], y[train_idx]
    loss = torch.tensor(float("nan"))
    for _ in range(epochs):
        perm = torch.randperm(len(xt), generator=gen)
        for s in range(0, len(xt), batch_size):
            idx = perm[s:s + batch_size]
            loss = torch.nn.functional.cross_entropy(head(xt[idx]), yt[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    with torch.no_grad():
        val_acc = (head(x[val_idx]).argmax(1) == y[val_idx]).float().mean().item()
        train_acc = (head(xt).argmax(1) == yt).float().mean().item()
    return ProbeFit(val_acc, train_acc, float(loss.detach()))


@dataclass
class ProbeReport:
    records: list = field(default_factory=list)  # dicts with layer, t, accuracy
    epochs: int = 0
    lr: float = 0.0
    train_size: int = 0
    val_size: int = 0

    def accuracy(self, layer: int, t: float) -> float:
        for r in self.records:
            if r["layer"] == layer and abs(r["t"] - t) < 1e-12:
                return r["accuracy"]
        raise KeyError((layer, t))

    def to_jsonl(self) -> str:
        meta = {"epochs": self.epochs, "lr": self.lr, "train_size": self.train_size, "val_size": self.val_size}
        return "".join(json.dumps({**r, **meta}, sort_keys=True) + "\n" for r in self.records)

    def to_table(self) -> str:
        lines = ["layer,t,accuracy"]
        lines += [f"{r['layer']},{r['t']},{r['accuracy']:.6f}" for r in self.records]
        return "\n".join(lines) + "\n"


def probe_grid(model, images, labels, layers=None, times=(0.1, 0.4, 0.7), epochs: int = 50,
               lr: float = 1e-2, seed: int = 0, val_fraction: float = 0.2) -> ProbeReport:
    """Probe accuracy for every (layer, t) pair on a fixed train/validation split."""
    layers = list(layers or range(1, model.config.depth + 1))
    labels = np.asarray(labels)
    train_idx, val_idx = split_indices(len(labels), val_fraction, seed)
    report = ProbeReport(epochs=epochs, lr=lr, train_size=len(train_idx), val_size=len(val_idx))
    for t in times:
        feats = extract_features(model, images, layers, t, seed=seed)
        for k in layers:
            fit = train_linear_probe(feats[k], labels, (train_idx, val_idx), epochs=epochs, lr=lr, seed=seed,
                                     num_classes=model.config.num_classes)
            report.records.append({"layer": k, "t": float(t), "accuracy": fit.accuracy})
    return report
