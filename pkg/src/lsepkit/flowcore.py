"""Interpolant schedules, noising, velocity targets and velocity/score conversion.

Time runs over [0, 1] with t=0 the clean data and t=1 pure Gaussian noise.
All functions are pure and operate on torch tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .errors import NumericalError, ValidationError

ScalarFn = Callable[[torch.Tensor], torch.Tensor]

DEFAULT_T_MIN = 1e-3


@dataclass(frozen=True)
class InterpolantSchedule:
    """The pair (alpha_t, sigma_t) of x_t = alpha_t * x0 + sigma_t * eps, with derivatives."""

    name: str
    alpha: ScalarFn
    sigma: ScalarFn
    alpha_dot: ScalarFn
    sigma_dot: ScalarFn


LINEAR = InterpolantSchedule(
    name="linear",
    alpha=lambda t: 1.0 - t,
    sigma=lambda t: t,
    alpha_dot=lambda t: -torch.ones_like(t),
    sigma_dot=lambda t: torch.ones_like(t),
)

SCHEDULES = {"linear": LINEAR}


def get_schedule(name: str) -> InterpolantSchedule:
    try:
        return SCHEDULES[name]
    except KeyError:
        raise ValidationError(f"unknown schedule {name!r}; available: {sorted(SCHEDULES)}") from None


@dataclass
class NoisyBatch:
    x_t: torch.Tensor
    t: torch.Tensor
    epsilon: torch.Tensor
    x0: torch.Tensor


def _per_sample(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.reshape(-1, *([1] * (like.dim() - 1))).to(like.dtype)


def _check(x0: torch.Tensor, epsilon: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    if x0.shape != epsilon.shape:
        raise ValidationError(f"epsilon shape {tuple(epsilon.shape)} != x0 shape {tuple(x0.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)
    if t.dim() == 0:
        t = t.expand(x0.shape[0])
    if t.shape != (x0.shape[0],):
        raise ValidationError(f"t must have shape ({x0.shape[0]},), got {tuple(t.shape)}")
    if bool(((t < 0) | (t > 1)).any()) or not bool(torch.isfinite(t).all()):
        raise ValidationError("all t must lie in [0, 1]")
    return t


def forward_noising(x0, epsilon, t, sched: InterpolantSchedule = LINEAR) -> NoisyBatch:
    t = _check(x0, epsilon, t)
    tt = _per_sample(t, x0)
    x_t = sched.alpha(tt) * x0 + sched.sigma(tt) * epsilon
    return NoisyBatch(x_t=x_t, t=t, epsilon=epsilon, x0=x0)


def velocity_target(x0, epsilon, t, sched: InterpolantSchedule = LINEAR) -> torch.Tensor:
    t = _check(x0, epsilon, t)
    tt = _per_sample(t, x0)
    return sched.alpha_dot(tt) * x0 + sched.sigma_dot(tt) * epsilon


def per_sample_velocity_loss(predicted, x0, epsilon, t, sched: InterpolantSchedule = LINEAR) -> torch.Tensor:
    """Mean squared velocity error per batch entry, shape (batch,)."""
    target = velocity_target(x0, epsilon, t, sched)
    if predicted.shape != target.shape:
        raise ValidationError(f"predicted shape {tuple(predicted.shape)} != target shape {tuple(target.shape)}")
    for name, arr in (("predicted", predicted), ("x0", x0), ("epsilon", epsilon)):
        if not bool(torch.isfinite(arr).all()):
            raise NumericalError(f"non-finite values in {name}")
    return (predicted - target).pow(2).flatten(1).mean(dim=1)


def velocity_loss(predicted, x0, epsilon, t, sched: InterpolantSchedule = LINEAR) -> torch.Tensor:
    """Mean over batch and elements of the squared velocity error."""
    return per_sample_velocity_loss(predicted, x0, epsilon, t, sched).mean()


def score_from_velocity(x_t, v_hat, t, sched: InterpolantSchedule = LINEAR, t_min: float = DEFAULT_T_MIN):
    """Score implied by a velocity estimate under the linear interpolant.

    eps_hat = x_t + (1 - t) * v_hat, score = -eps_hat / t.
    """
    if sched.name != "linear":
        raise ValidationError("score_from_velocity is only defined for the linear schedule")
    if x_t.shape != v_hat.shape:
        raise ValidationError(f"v_hat shape {tuple(v_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device)
    if t.dim() == 0:
        t = t.expand(x_t.shape[0])
    if bool((t <= t_min).any()):
        raise ValidationError(f"score conversion requires t > t_min={t_min}")
    tt = _per_sample(t, x_t)
    return -(x_t + (1.0 - tt) * v_hat) / tt
