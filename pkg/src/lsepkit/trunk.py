"""SiT-style patch transformer with adaLN-zero time/class conditioning.

Besides the full velocity forward pass the model exposes ``forward_to_depth``,
a truncated pass through blocks 1..k under its own class conditioning. The
probe branch uses it with labels that differ from the denoiser's.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    input_size: int = 32
    patch_size: int = 4
    depth: int = 6
    hidden_dim: int = 192
    num_heads: int = 3
    num_classes: int = 10
    target_depth: int = 2
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ValidationError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if not 1 <= self.target_depth < self.depth:
            raise ValidationError(f"target_depth must satisfy 1 <= k < depth, got k={self.target_depth}, depth={self.depth}")
        if self.hidden_dim % self.num_heads:
            raise ValidationError("hidden_dim must be divisible by num_heads")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")

    @property
    def null_label_id(self) -> int:
        return self.num_classes

    @property
    def grid_side(self) -> int:
        return self.input_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_side ** 2

    def to_dict(self) -> dict:
        return asdict(self)


# SiT B/L/XL act on 32x32x4 SD-VAE latents with patch 2 and 1000 ImageNet classes.
PRESETS = {
    "B": ModelConfig(input_channels=4, input_size=32, patch_size=2, depth=12, hidden_dim=768,
                     num_heads=12, num_classes=1000, target_depth=4),
    "L": ModelConfig(input_channels=4, input_size=32, patch_size=2, depth=24, hidden_dim=1024,
                     num_heads=16, num_classes=1000, target_depth=7),
    "XL": ModelConfig(input_channels=4, input_size=32, patch_size=2, depth=28, hidden_dim=1152,
                      num_heads=16, num_classes=1000, target_depth=8),
    "tiny": ModelConfig(input_channels=3, input_size=32, patch_size=4, depth=6, hidden_dim=192,
                        num_heads=3, num_classes=10, target_depth=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown model preset {name!r}; available: {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def sincos_pos_embed(dim: int, side: int) -> torch.Tensor:
    """Fixed 2-D sine-cosine positional table of shape (side*side, dim)."""
    if dim % 4:
        raise ValidationError("hidden_dim must be divisible by 4 for 2-D sincos embeddings")
    omega = 1.0 / 10000 ** (torch.arange(dim // 4, dtype=torch.float64) / (dim / 4.0))
    coords = torch.arange(side, dtype=torch.float64)
    gy, gx = torch.meshgrid(coords, coords, indexing="ij")

    def axis(pos):
        out = pos.reshape(-1, 1) * omega[None]
        return torch.cat([torch.sin(out), torch.cos(out)], dim=1)

    return torch.cat([axis(gy), axis(gx)], dim=1).float()


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden_size, frequency_embedding_size=256):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(frequency_embedding_size, hidden_size),
            nn.SiLU(),
            nn.Linear(hidden_size, hidden_size),
        )
        self.frequency_embedding_size = frequency_embedding_size

    @staticmethod
    def timestep_embedding(t, dim, max_period=10000):
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
        args = t[:, None].float() * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t):
        # SiT feeds t in [0, 1] scaled to the usual 1000-step range.
        freq = self.timestep_embedding(t * 1000.0, self.frequency_embedding_size)
        return self.mlp(freq.to(self.mlp[0].weight.dtype))


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        x = F.scaled_dot_product_attention(q, k, v)
        return self.proj(x.transpose(1, 2).reshape(B, N, C))


class SiTBlock(nn.Module):
    """Transformer block with adaLN-zero conditioning."""

    def __init__(self, hidden_size, num_heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden_size, num_heads)
        self.norm2 = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        mlp_hidden = int(hidden_size * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(hidden_size, mlp_hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_hidden, hidden_size),
        )
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden_size, 6 * hidden_size))

    def forward(self, x, c):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class FinalLayer(nn.Module):
    def __init__(self, hidden_size, patch_size, out_channels):
        super().__init__()
        self.norm_final = nn.LayerNorm(hidden_size, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(hidden_size, patch_size * patch_size * out_channels)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden_size, 2 * hidden_size))

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm_final(x), shift, scale))


@dataclass
class HiddenFeatures:
    tokens: torch.Tensor  # (batch, T, hidden_dim)
    layer_index: int
    t: torch.Tensor


class SiT(nn.Module):
    """Velocity-predicting diffusion transformer.

    Labels in [0, num_classes) are real classes; ``num_classes`` itself is the
    null label used for classifier-free guidance and the probe branch.
    """

    def __init__(self, config: ModelConfig, check_finite: bool = True):
        super().__init__()
        self.config = config
        self.check_finite = check_finite
        D, p = config.hidden_dim, config.patch_size
        self.x_embedder = nn.Conv2d(config.input_channels, D, kernel_size=p, stride=p)
        self.t_embedder = TimestepEmbedder(D)
        self.y_embedder = nn.Embedding(config.num_classes + 1, D)
        self.register_buffer("pos_embed", sincos_pos_embed(D, config.grid_side)[None], persistent=False)
        self.blocks = nn.ModuleList([SiTBlock(D, config.num_heads, config.mlp_ratio) for _ in range(config.depth)])
        self.final_layer = FinalLayer(D, p, config.input_channels)
        self.initialize_weights()

    def initialize_weights(self):
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

        self.apply(_basic_init)
        w = self.x_embedder.weight.data
        nn.init.xavier_uniform_(w.view(w.shape[0], -1))
        nn.init.zeros_(self.x_embedder.bias)
        nn.init.normal_(self.y_embedder.weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)
        for block in self.blocks:
            nn.init.zeros_(block.adaLN_modulation[-1].weight)
            nn.init.zeros_(block.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.final_layer.adaLN_modulation[-1].bias)
        nn.init.zeros_(self.final_layer.linear.weight)
        nn.init.zeros_(self.final_layer.linear.bias)

    def _validate(self, x_t, t, labels):
        cfg = self.config
        expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if x_t.dim() != 4 or tuple(x_t.shape[1:]) != expected:
            raise ValidationError(f"expected x_t of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x_t.shape)}")
        if t.shape != (x_t.shape[0],) or labels.shape != (x_t.shape[0],):
            raise ValidationError("t and labels must have shape (batch,)")
        if bool(((labels < 0) | (labels > cfg.num_classes)).any()):
            raise ValidationError(f"labels must lie in [0, {cfg.num_classes}]")
        if bool(((t < 0) | (t > 1)).any()):
            raise ValidationError("t must lie in [0, 1]")

    def embed(self, x_t, t, labels):
        """Patchify and embed; returns (tokens, conditioning vector)."""
        self._validate(x_t, t, labels)
        tokens = self.x_embedder(x_t).flatten(2).transpose(1, 2) + self.pos_embed
        c = self.t_embedder(t) + self.y_embedder(labels)
        return tokens, c

    def _run_blocks(self, x, c, depth, record=None):
        for i, block in enumerate(self.blocks[:depth]):
            x = block(x, c)
            if self.check_finite and not bool(torch.isfinite(x).all()):
                raise NumericalError(f"non-finite activations after block {i + 1}", layer=i + 1)
            if record is not None:
                record.append(x)
        return x

    def forward_to_depth(self, x_t, t, labels, k: int, record=None) -> HiddenFeatures:
        """Output of block k (1-based) under the given conditioning."""
        if not 1 <= k <= self.config.depth:
            raise ValidationError(f"k must lie in [1, {self.config.depth}], got {k}")
        x, c = self.embed(x_t, t, labels)
        return HiddenFeatures(tokens=self._run_blocks(x, c, k, record), layer_index=k, t=t)

    def unpatchify(self, x):
        cfg = self.config
        p, h, C = cfg.patch_size, cfg.grid_side, cfg.input_channels
        x = x.reshape(x.shape[0], h, h, p, p, C)
        x = torch.einsum("nhwpqc->nchpwq", x)
        return x.reshape(x.shape[0], C, h * p, h * p)

    def forward_velocity(self, x_t, t, labels, record=None):
        """Predict the velocity field. ``record`` (a list) receives each block's output."""
        x, c = self.embed(x_t, t, labels)
        x = self._run_blocks(x, c, self.config.depth, record)
        out = self.unpatchify(self.final_layer(x, c))
        if self.check_finite and not bool(torch.isfinite(out).all()):
            raise NumericalError("non-finite activations in the output head", layer=self.config.depth + 1)
        return out

    forward = forward_velocity


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
