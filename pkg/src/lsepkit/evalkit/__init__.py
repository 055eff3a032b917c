from .frechet import FrechetStats, frechet_distance, stats_from_features
from .pca import PCAResult, pca_project
from .probing import ProbeReport, extract_features, probe_grid, train_linear_probe

__all__ = [
    "FrechetStats",
    "frechet_distance",
    "stats_from_features",
    "PCAResult",
    "pca_project",
    "ProbeReport",
    "extract_features",
    "probe_grid",
    "train_linear_probe",
]
