"""
Per-Gaussian spectral report: ρ, κ and H of every 3D covariance plus a
scene summary (mean H, κ quartiles, needle count below τ_spectral).
"""

import csv
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from spectral_splat.core.scene import GaussianScene
from spectral_splat.core.spectral import entropy_from_eigenvalues, kappa_from_eigenvalues
from spectral_splat.storage.images import atomic_path, write_json
from spectral_splat.utils.errors import EmptySceneError
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

# Stable column order of the per-Gaussian CSV.
COLUMNS = ("index", "radius", "kappa", "entropy", "opacity")
DEFAULT_NEEDLE_THRESHOLD = 0.5
QUARTILES = (0.25, 0.5, 0.75)


@dataclass
class SpectralSummaryStats:
    count: int
    entropy_mean: float
    kappa_q1: float
    kappa_median: float
    kappa_q3: float
    needle_count: int
    needle_threshold: float


@dataclass
class AnalysisReport:
    rows: List[Dict[str, float]]
    summary: SpectralSummaryStats

    def as_dict(self) -> dict:
        return {"summary": asdict(self.summary), "gaussians": self.rows}


def spectral_statistics(
    eigenvalues: np.ndarray, threshold: float = DEFAULT_NEEDLE_THRESHOLD
) -> SpectralSummaryStats:
    """Summary over rows of eigenvalues (N, dim); shared with the zoom bench."""
    if eigenvalues.shape[0] == 0:
        raise EmptySceneError("No Gaussians to summarize")
    entropy = entropy_from_eigenvalues(eigenvalues)
    kappa = kappa_from_eigenvalues(eigenvalues)
    with np.errstate(invalid="ignore"):
        quartiles = np.quantile(kappa, QUARTILES)
    # interpolating against the κ = ∞ sentinel gives NaN; use the order statistic there
    q1, q2, q3 = np.where(np.isnan(quartiles), np.quantile(kappa, QUARTILES, method="nearest"), quartiles)
    return SpectralSummaryStats(
        count=int(eigenvalues.shape[0]),
        entropy_mean=float(np.mean(entropy)),
        kappa_q1=float(q1),
        kappa_median=float(q2),
        kappa_q3=float(q3),
        needle_count=int(np.count_nonzero(entropy < threshold)),
        needle_threshold=threshold,
    )


def analyze_scene(scene: GaussianScene, needle_threshold: float = DEFAULT_NEEDLE_THRESHOLD) -> AnalysisReport:
    """
    Raises:
        EmptySceneError: the scene has no Gaussians.
    """
    if len(scene) == 0:
        raise EmptySceneError("Scene has no Gaussians")
    # eigenvalues of R·diag(v)·Rᵀ are the per-axis variances
    var = scene.variances()
    radius = np.max(var, axis=1)
    kappa = kappa_from_eigenvalues(var)
    entropy = entropy_from_eigenvalues(var)
    opacity = scene.opacities()
    rows = [
        {"index": i, "radius": float(radius[i]), "kappa": float(kappa[i]),
         "entropy": float(entropy[i]), "opacity": float(opacity[i])}
        for i in range(len(scene))
    ]
    summary = spectral_statistics(var, needle_threshold)
    logger.info(
        f"analyze: N={summary.count} mean H={summary.entropy_mean:.4f} "
        f"median κ={summary.kappa_median:.4g} needles={summary.needle_count}"
    )
    return AnalysisReport(rows=rows, summary=summary)


def write_rows_csv(path: str, rows: List[Dict], columns) -> str:
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("inf" if isinstance(v, float) and np.isinf(v) else v) for k, v in row.items()})
    return path


def write_report(report: AnalysisReport, path: str, fmt: Optional[str] = None) -> str:
    """Write the report as CSV (per-Gaussian rows) or JSON (summary + rows); format from the extension by default."""
    fmt = (fmt or ("json" if path.lower().endswith(".json") else "csv")).lower()
    if fmt == "json":
        write_json(path, report.as_dict())
    else:
        write_rows_csv(path, report.rows, COLUMNS)
    logger.info(f"Wrote {fmt} report to {path}")
    return path
