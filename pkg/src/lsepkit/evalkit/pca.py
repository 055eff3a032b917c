from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError


@dataclass
class PCAResult:
    projected: np.ndarray  # (count, components)
    explained_variance_ratio: np.ndarray
    components: np.ndarray  # (components, feat_dim)
    degenerate: bool


def pca_project(features, components: int = 3) -> PCAResult:
    """Project centred features onto their top principal directions.

    If the data has rank below ``components`` the missing directions are padded
    with zeros and ``degenerate`` is set.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("features must be (count, feat_dim)")
    if x.shape[0] <= components:
        raise ValidationError(f"need more than {components} points, got {x.shape[0]}")
    xc = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    k = min(components, rank)
    comps = np.zeros((components, x.shape[1]))
    comps[:k] = vt[:k]
    ratio = np.zeros(components)
    if total > 0:
        ratio[:k] = var[:k] / total
    return PCAResult(xc @ comps.T, ratio, comps, degenerate=rank < components)
