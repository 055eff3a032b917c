"""Optional representation-alignment regularizer with pluggable clean-image feature providers."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, safe_open, save_file

from . import flowcore
from .errors import ValidationError
from .lsep import LossParts, ProbePolicy, lsep_loss

FEATURE_FILE_FORMAT = "lsepkit.features/1"


@dataclass(frozen=True)
class ProviderDescriptor:
    name: str
    feat_dim: int


class FeatureProvider(Protocol):
    descriptor: ProviderDescriptor

    def clean_features(self, x_clean: torch.Tensor, ids: Sequence[int] | None = None) -> torch.Tensor:
        """Return (batch, N, feat_dim) features of the clean inputs."""


def resample_tokens(features: torch.Tensor, num_tokens: int) -> torch.Tensor:
    """Resample a square token grid (B, N, C) to (B, num_tokens, C) by area averaging or bilinear upsampling."""
    B, N, C = features.shape
    if N == num_tokens:
        return features
    src, dst = int(round(N ** 0.5)), int(round(num_tokens ** 0.5))
    if src * src != N or dst * dst != num_tokens:
        raise ValidationError("token counts must be perfect squares to resample")
    grid = features.transpose(1, 2).reshape(B, C, src, src)
    if dst < src:
        grid = F.adaptive_avg_pool2d(grid, dst)
    else:
        grid = F.interpolate(grid, size=(dst, dst), mode="bilinear", align_corners=False)
    return grid.reshape(B, C, num_tokens).transpose(1, 2)


class EncoderProvider:
    """Wraps a frozen encoder returning a (B, C, h, w) feature map."""

    def __init__(self, encoder: nn.Module, feat_dim: int, num_tokens: int, name: str = "desk-encoder"):
        self.encoder = encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.num_tokens = num_tokens
        self.descriptor = ProviderDescriptor(name, feat_dim)

    @torch.no_grad()
    def clean_features(self, x_clean, ids=None):
        fmap = self.encoder.feature_map(x_clean)
        tokens = fmap.flatten(2).transpose(1, 2)
        return resample_tokens(tokens, self.num_tokens)


class PrecomputedProvider:
    """Feature provider backed by a feature file keyed by sample id."""

    def __init__(self, path, num_tokens: int | None = None):
        self.path = Path(path)
        with safe_open(str(self.path), framework="pt") as f:
            meta = f.metadata() or {}
        if meta.get("format") != FEATURE_FILE_FORMAT:
            raise ValidationError(f"{self.path} is not a feature file (format={meta.get('format')!r})")
        self.descriptor = ProviderDescriptor(meta["provider"], int(meta["feat_dim"]))
        self.features = load_file(str(self.path))
        self.num_tokens = num_tokens

    def clean_features(self, x_clean, ids=None):
        if ids is None:
            raise ValidationError("precomputed features are looked up by sample id")
        try:
            feats = torch.stack([self.features[str(int(i))] for i in ids])
        except KeyError as exc:
            raise ValidationError(f"sample id {exc.args[0]} missing from {self.path}") from None
        if self.num_tokens is not None:
            feats = resample_tokens(feats, self.num_tokens)
        return feats.to(x_clean.device)


def save_feature_file(path, features: dict, descriptor: ProviderDescriptor, extra: dict | None = None):
    """Write {sample id: (N, feat_dim) tensor} with a header naming the provider."""
    tensors = {}
    for key, value in features.items():
        value = torch.as_tensor(value).contiguous()
        if value.dim() != 2 or value.shape[1] != descriptor.feat_dim:
            raise ValidationError(f"feature for id {key} has shape {tuple(value.shape)}, expected (N, {descriptor.feat_dim})")
        tensors[str(key)] = value
    meta = {"format": FEATURE_FILE_FORMAT, "provider": descriptor.name, "feat_dim": str(descriptor.feat_dim)}
    if extra:
        meta["extra"] = json.dumps(extra, sort_keys=True)
    save_file(tensors, str(path), metadata=meta)


class AlignmentHead(nn.Module):
    """MLP projecting trunk tokens into the provider's feature space."""

    def __init__(self, hidden_dim: int, feat_dim: int, width: int = 512, depth: int = 3):
        super().__init__()
        if depth < 1:
            raise ValidationError("alignment head depth must be >= 1")
        dims = [hidden_dim] + [width] * (depth - 1) + [feat_dim]
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(a, b))
            if i < depth - 1:
                layers.append(nn.SiLU())
        self.mlp = nn.Sequential(*layers)
        self.feat_dim = feat_dim
        self.zero_norm_patches = 0

    def forward(self, tokens):
        return self.mlp(tokens)


def cosine_alignment(projected: torch.Tensor, targets: torch.Tensor, eps: float = 1e-12):
    """Patch-wise cosine similarity (B, N); zero-norm patches get similarity 0.

    Returns (similarity, number of zero-norm patches).
    """
    if projected.shape != targets.shape:
        raise ValidationError(f"projected {tuple(projected.shape)} and targets {tuple(targets.shape)} differ")
    pn = projected.norm(dim=-1)
    tn = targets.norm(dim=-1)
    ok = (pn > eps) & (tn > eps)
    dot = (projected * targets).sum(dim=-1)
    denom = torch.where(ok, pn * tn, torch.ones_like(pn))
    sim = torch.where(ok, dot / denom, torch.zeros_like(dot))
    return sim, int((~ok).sum())


def repa_loss(hidden_tokens: torch.Tensor, targets: torch.Tensor, head: AlignmentHead) -> torch.Tensor:
    """Negative mean patch-wise cosine similarity between targets and projected hidden tokens."""
    if hidden_tokens.shape[:2] != targets.shape[:2]:
        raise ValidationError(f"patch counts differ: hidden {tuple(hidden_tokens.shape[:2])}, targets {tuple(targets.shape[:2])}")
    sim, bad = cosine_alignment(head(hidden_tokens), targets)
    head.zero_norm_patches += bad
    return -sim.mean()


def combined_repa_lsep_loss(model, head, align_head: AlignmentHead, targets, x0, epsilon, t, gt_labels,
                            policy: ProbePolicy, *, lam: float = 0.5, align_depth: int | None = None,
                            use_probe: bool = True, sched=flowcore.LINEAR, **lsep_kwargs) -> LossParts:
    """L_velocity + lam * L_repa + omega * L_class.

    Alignment uses the denoising pass's own activations at ``align_depth``
    (defaults to the probe's target depth); ``targets`` are clean-input features.
    """
    depth = align_depth or policy.target_depth
    record = []
    parts = lsep_loss(model, head, x0, epsilon, t, gt_labels, policy, sched=sched, use_probe=use_probe,
                      record=record, **lsep_kwargs)
    r_loss = repa_loss(record[depth - 1], targets, align_head)
    parts.total = parts.total + lam * r_loss
    parts.repa = r_loss
    return parts
