"""Fréchet distance between Gaussian fits of feature sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ..errors import NumericalError, ValidationError


@dataclass
class FrechetStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ValidationError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        if self.count < 2:
            raise ValidationError("need at least 2 samples for Fréchet statistics")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8):
            raise ValidationError("covariance is not symmetric")


def stats_from_features(features) -> FrechetStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValidationError("features must be (count, feat_dim)")
    cov = np.cov(f, rowvar=False)
    cov = 0.5 * (np.atleast_2d(cov) + np.atleast_2d(cov).T)
    return FrechetStats(f.mean(axis=0), cov, f.shape[0])


def frechet_distance(a: FrechetStats, b: FrechetStats, eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})."""
    if a.mean.shape != b.mean.shape:
        raise ValidationError(f"feature dims differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    covmean, _ = linalg.sqrtm(a.covariance @ b.covariance, disp=False)
    if not np.isfinite(covmean).all():
        # Near-singular product: retry with a small diagonal offset.
        offset = np.eye(a.covariance.shape[0]) * eps
        covmean = linalg.sqrtm((a.covariance + offset) @ (b.covariance + offset))
        if not np.isfinite(covmean).all():
            cond = (np.linalg.cond(a.covariance), np.linalg.cond(b.covariance))
            raise NumericalError(f"matrix square root failed; condition numbers {cond[0]:.3g}, {cond[1]:.3g}")
    if np.iscomplexobj(covmean):
        if not np.allclose(np.diagonal(covmean).imag, 0, atol=1e-3):
            cond = (np.linalg.cond(a.covariance), np.linalg.cond(b.covariance))
            raise NumericalError(
                f"imaginary component {np.max(np.abs(covmean.imag)):.3g} in matrix square root; "
                f"condition numbers {cond[0]:.3g}, {cond[1]:.3g}"
            )
        covmean = covmean.real
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(covmean))
    return max(value, 0.0) if value > -1e-6 else value
