"""Linear-separability regularizer: probe head, probe-branch conditioning,
random-crop pooling, time-binned classification weight and the combined loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from decimal import Decimal
from functools import cached_property

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import flowcore
from .errors import NumericalError, ValidationError


@dataclass(frozen=True)
class ProbePolicy:
    target_depth: int = 2
    rho_L: float = 0.9
    crop_min: int = 6
    crop_max: int = 8
    omega_start: float = 0.0275
    omega_end: float = 0.0325
    bins: int = 10
    probe_lr: float = 1e-4
    # False: non-null probe labels are the ground truth. True: a uniformly drawn real class.
    random_other_label: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rho_L <= 1.0:
            raise ValidationError(f"rho_L must lie in [0, 1], got {self.rho_L}")
        if self.omega_start > self.omega_end:
            raise ValidationError("omega_start must not exceed omega_end")
        if self.bins < 1:
            raise ValidationError("bins must be >= 1")
        if not 1 <= self.crop_min <= self.crop_max:
            raise ValidationError(f"need 1 <= crop_min <= crop_max, got [{self.crop_min}, {self.crop_max}]")
        if self.target_depth < 1:
            raise ValidationError("target_depth must be >= 1")

    def validate_for_grid(self, grid_side: int):
        if self.crop_max > grid_side:
            raise ValidationError(f"crop_max {self.crop_max} exceeds feature grid side {grid_side}")

    @cached_property
    def omega_levels(self) -> tuple[float, ...]:
        # Decimal keeps the levels equal to start + j * (end - start) / bins as written.
        start, end = Decimal(repr(self.omega_start)), Decimal(repr(self.omega_end))
        step = (end - start) / self.bins
        return tuple(float(start + j * step) for j in range(self.bins))

    @property
    def enabled(self) -> bool:
        return self.omega_end > 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def omega_class(t, policy: ProbePolicy):
    """Piecewise-constant classification weight.

    Bin index is j = min(floor(t * bins), bins - 1). Accepts a float or a tensor of times.
    """
    if isinstance(t, torch.Tensor):
        if bool(((t < 0) | (t > 1)).any()):
            raise ValidationError("t must lie in [0, 1]")
        j = torch.clamp(torch.floor(t.double() * policy.bins).long(), max=policy.bins - 1)
        levels = torch.tensor(policy.omega_levels, dtype=torch.float64, device=t.device)
        return levels[j]
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValidationError("t must lie in [0, 1]")
    return policy.omega_levels[min(int(t * policy.bins), policy.bins - 1)]


def sample_probe_labels(gt_labels, rho_L: float, generator: torch.Generator, null_label_id: int,
                        random_other_label: bool = False):
    """Replace each label by the null label with probability rho_L."""
    if bool((gt_labels == null_label_id).any()) or bool(((gt_labels < 0) | (gt_labels > null_label_id)).any()):
        raise ValidationError("gt_labels must be real class ids, never the null label")
    u = torch.rand(gt_labels.shape, generator=generator, device=gt_labels.device)
    drop = u < rho_L
    other = gt_labels
    if random_other_label:
        other = torch.randint(0, null_label_id, gt_labels.shape, generator=generator, device=gt_labels.device)
    return torch.where(drop, torch.full_like(gt_labels, null_label_id), other)


def sample_crop(policy: ProbePolicy, grid_side: int, generator: torch.Generator):
    """Draw (n, (row, col)) uniformly: n over [crop_min, crop_max], then origin over valid placements."""
    policy.validate_for_grid(grid_side)
    n = int(torch.randint(policy.crop_min, policy.crop_max + 1, (1,), generator=generator))
    free = grid_side - n + 1
    pos = int(torch.randint(0, free * free, (1,), generator=generator))
    return n, (pos // free, pos % free)


def crop_pool(tokens: torch.Tensor, n: int, origin=(0, 0)) -> torch.Tensor:
    """Mean over an n x n window of the token grid. tokens: (batch, T, D) -> (batch, D)."""
    B, T, D = tokens.shape
    side = int(round(T ** 0.5))
    if side * side != T:
        raise ValidationError(f"token count {T} is not a perfect square")
    r, c = origin
    if n < 1 or r < 0 or c < 0 or r + n > side or c + n > side:
        raise ValidationError(f"{n}x{n} window at {origin} does not fit a {side}x{side} grid")
    grid = tokens.reshape(B, side, side, D)
    return grid[:, r:r + n, c:c + n, :].mean(dim=(1, 2))


class ProbeHead(nn.Module):
    """LayerNorm followed by a linear classifier; softmax lives in the loss."""

    def __init__(self, hidden_dim: int, num_classes: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden_dim)
        self.linear = nn.Linear(hidden_dim, num_classes)

    def forward(self, pooled):
        return probe_forward(pooled, self)


def probe_head_param_count(hidden_dim: int, num_classes: int) -> int:
    return hidden_dim * num_classes + 2 * hidden_dim + num_classes


def probe_forward(pooled: torch.Tensor, head: ProbeHead) -> torch.Tensor:
    if not bool(torch.isfinite(pooled).all()):
        raise NumericalError("non-finite pooled features fed to the probe")
    return head.linear(head.norm(pooled))


def class_loss(logits, gt_labels, reduction: str = "mean"):
    """Cross-entropy of the probe logits against ground-truth classes."""
    if not bool(torch.isfinite(logits).all()):
        raise NumericalError("non-finite probe logits")
    return F.cross_entropy(logits, gt_labels, reduction=reduction)


def drop_labels(labels, rho_D: float, generator: torch.Generator, null_label_id: int):
    """Denoiser-side classifier-free-guidance label dropout."""
    u = torch.rand(labels.shape, generator=generator, device=labels.device)
    return torch.where(u < rho_D, torch.full_like(labels, null_label_id), labels)


@dataclass
class LossParts:
    total: torch.Tensor
    velocity: torch.Tensor
    class_: torch.Tensor
    omega_mean: float
    null_fraction: float
    crop: tuple = (0, (0, 0))
    repa: torch.Tensor | None = None
    hidden: object = field(default=None, repr=False)


def probe_branch(model, head, x_t, t, gt_labels, policy: ProbePolicy, probe_gen, crop_gen,
                 null_label_id: int):
    """Run the truncated probe pass; returns (per-sample CE, probe labels, crop)."""
    labels = sample_probe_labels(gt_labels, policy.rho_L, probe_gen, null_label_id, policy.random_other_label)
    hidden = model.forward_to_depth(x_t, t, labels, policy.target_depth)
    side = int(round(hidden.tokens.shape[1] ** 0.5))
    n, origin = sample_crop(policy, side, crop_gen)
    logits = probe_forward(crop_pool(hidden.tokens, n, origin), head)
    return class_loss(logits, gt_labels, reduction="none"), labels, (n, origin), hidden


def lsep_loss(model, head, x0, epsilon, t, gt_labels, policy: ProbePolicy, *, probe_gen=None, crop_gen=None,
              cfg_gen=None, rho_D: float = 0.1, sched=flowcore.LINEAR, denoiser_labels=None,
              use_probe: bool = True, record=None) -> LossParts:
    """Velocity loss plus the time-weighted probe cross-entropy.

    The denoiser sees ground-truth labels dropped to null with probability rho_D
    (drawn from ``cfg_gen``); the probe branch draws its own labels and crop from
    ``probe_gen``/``crop_gen`` so the denoising randomness is unaffected.
    ``use_probe=False`` gives the plain velocity objective. ``record`` collects
    the denoiser's per-block activations.
    """
    null_id = model.config.null_label_id
    noisy = flowcore.forward_noising(x0, epsilon, t, sched)
    if denoiser_labels is None:
        denoiser_labels = drop_labels(gt_labels, rho_D, cfg_gen, null_id)
    v_pred = model.forward_velocity(noisy.x_t, noisy.t, denoiser_labels, record=record)
    v_loss = flowcore.velocity_loss(v_pred, x0, epsilon, noisy.t, sched)
    if not use_probe:
        zero = v_loss.new_zeros(())
        return LossParts(total=v_loss, velocity=v_loss, class_=zero, omega_mean=0.0, null_fraction=0.0)

    ce, probe_labels, crop, hidden = probe_branch(model, head, noisy.x_t, noisy.t, gt_labels, policy,
                                                  probe_gen, crop_gen, null_id)
    omega = omega_class(noisy.t, policy).to(ce.dtype)
    weighted = (omega * ce).mean()
    return LossParts(
        total=v_loss + weighted,
        velocity=v_loss,
        class_=ce.mean(),
        omega_mean=float(omega.mean()),
        null_fraction=float((probe_labels == null_id).float().mean()),
        crop=crop,
        hidden=hidden,
    )
