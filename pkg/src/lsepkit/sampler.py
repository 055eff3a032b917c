"""Euler ODE and Euler-Maruyama SDE samplers with interval-gated classifier-free guidance.

Integration runs on a uniform grid from t=1 (noise) to t=0 (data). The SDE
uses diffusion coefficient w_t (sigma_t by default) and switches to a plain
Euler step once the next grid point falls below ``t_min``, where the score
conversion would be singular.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import torch

from . import flowcore
from .errors import NumericalError, ValidationError

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class SampleSpec:
    kind: str = "sde"
    steps: int = 250
    cfg_weight: float = 1.0
    # None disables guidance entirely; otherwise an inclusive [t_lo, t_hi] range.
    interval: tuple[float, float] | None = (0.0, 1.0)
    t_min: float = flowcore.DEFAULT_T_MIN
    seed: int = 0
    labels: tuple[int, ...] = field(default_factory=tuple)
    # "t": the interval indexes t directly. "reverse": it indexes 1 - t.
    interval_convention: str = "t"

    def __post_init__(self):
        if self.kind not in ("ode", "sde"):
            raise ValidationError(f"kind must be 'ode' or 'sde', got {self.kind!r}")
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.cfg_weight < 1.0:
            raise ValidationError("cfg_weight must be >= 1")
        if self.interval is not None:
            lo, hi = self.interval
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValidationError(f"interval must satisfy 0 <= lo <= hi <= 1, got {self.interval}")
        if self.interval_convention not in ("t", "reverse"):
            raise ValidationError("interval_convention must be 't' or 'reverse'")

    def guidance_active(self, t: float) -> bool:
        if self.interval is None or self.cfg_weight == 1.0:
            return False
        lo, hi = self.interval
        x = t if self.interval_convention == "t" else 1.0 - t
        return lo <= x <= hi

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        d["interval"] = list(self.interval) if self.interval is not None else None
        return d


def guided_velocity(v_cond, v_uncond, t: float, spec: SampleSpec):
    if v_uncond is None or not spec.guidance_active(t):
        return v_cond
    if v_cond.shape != v_uncond.shape:
        raise ValidationError("v_cond and v_uncond shapes differ")
    return v_uncond + spec.cfg_weight * (v_cond - v_uncond)


def time_grid(steps: int, dtype=torch.float64) -> torch.Tensor:
    return torch.linspace(1.0, 0.0, steps + 1, dtype=dtype)


def diffusion_sigma(t: float) -> float:
    """w_t = sigma_t for the linear interpolant."""
    return t


def _velocity(velocity_fn: VelocityFn, x, t: float, labels, null_labels, spec: SampleSpec):
    tb = torch.full((x.shape[0],), t, dtype=x.dtype, device=x.device)
    v_cond = velocity_fn(x, tb, labels)
    v_uncond = None
    if spec.guidance_active(t):
        v_uncond = velocity_fn(x, tb, null_labels)
    return guided_velocity(v_cond, v_uncond, t, spec)


def initial_noise(shape, spec: SampleSpec, dtype=torch.float32, device="cpu"):
    gen = torch.Generator(device="cpu").manual_seed(spec.seed)
    return torch.randn(shape, generator=gen, dtype=dtype).to(device)


def _check_state(x, i):
    if not bool(torch.isfinite(x).all()):
        raise NumericalError(f"non-finite sampler state at step {i}", step=i)


def sample_ode(velocity_fn: VelocityFn, shape, spec: SampleSpec, labels=None, null_label: int = 0,
               dtype=torch.float32, device="cpu"):
    """Euler integration of dx/dt = v from t=1 to t=0."""
    x = initial_noise(shape, spec, dtype, device)
    labels, null_labels = _labels(labels, shape[0], null_label, device)
    grid = time_grid(spec.steps).tolist()
    for i in range(spec.steps):
        t, t_next = grid[i], grid[i + 1]
        dt = t - t_next
        v = _velocity(velocity_fn, x, t, labels, null_labels, spec)
        x = x - dt * v
        _check_state(x, i)
    return x


def sample_sde(velocity_fn: VelocityFn, shape, spec: SampleSpec, labels=None, null_label: int = 0,
               diffusion: Callable[[float], float] = diffusion_sigma, sched=flowcore.LINEAR,
               dtype=torch.float32, device="cpu"):
    """Euler-Maruyama for the reverse SDE dx = [v - w_t/2 * score] dt + sqrt(w_t) dW (time running backwards).

    The score comes from the guided velocity. Initial noise uses ``spec.seed``;
    the Brownian increments come from a second stream seeded ``spec.seed + 1``.
    """
    x = initial_noise(shape, spec, dtype, device)
    labels, null_labels = _labels(labels, shape[0], null_label, device)
    noise_gen = torch.Generator(device="cpu").manual_seed(spec.seed + 1)
    grid = time_grid(spec.steps).tolist()
    for i in range(spec.steps):
        t, t_next = grid[i], grid[i + 1]
        dt = t - t_next
        v = _velocity(velocity_fn, x, t, labels, null_labels, spec)
        if t_next < spec.t_min:
            x = x - dt * v
        else:
            w = diffusion(t)
            score = flowcore.score_from_velocity(x, v, torch.full((x.shape[0],), t, dtype=x.dtype),
                                                 sched, spec.t_min)
            z = torch.randn(x.shape, generator=noise_gen, dtype=x.dtype).to(x.device)
            x = x - dt * (v - 0.5 * w * score) + (w * dt) ** 0.5 * z
        _check_state(x, i)
    return x


def sample(velocity_fn: VelocityFn, shape, spec: SampleSpec, labels=None, null_label: int = 0, **kwargs):
    if spec.kind == "ode":
        kwargs.pop("diffusion", None)
        return sample_ode(velocity_fn, shape, spec, labels, null_label, **kwargs)
    return sample_sde(velocity_fn, shape, spec, labels, null_label, **kwargs)


def _labels(labels, n, null_label, device):
    if labels is None:
        labels = torch.full((n,), null_label, dtype=torch.long)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != (n,):
        raise ValidationError(f"need {n} labels, got shape {tuple(labels.shape)}")
    return labels.to(device), torch.full((n,), null_label, dtype=torch.long, device=device)


def model_velocity_fn(model) -> VelocityFn:
    """Adapt a trunk to the sampler's (x, t, labels) calling convention, without gradients."""

    @torch.no_grad()
    def fn(x, t, labels):
        return model.forward_velocity(x, t.to(x.dtype), labels)

    return fn


def gaussian_oracle_velocity(s: float) -> VelocityFn:
    """Exact optimal velocity for x0 ~ N(0, s^2 I) under the linear interpolant.

    v*(x, t) = [t - (1 - t) s^2] x / [(1 - t)^2 s^2 + t^2].
    """

    def fn(x, t, labels):
        tt = t.reshape(-1, *([1] * (x.dim() - 1))).to(x.dtype)
        var = (1 - tt) ** 2 * s * s + tt * tt
        return (tt - (1 - tt) * s * s) * x / var

    return fn
