"""
Adaptive density control: gradient-driven clone/split, shape-aware spectral
split and spectral pruning.

refine() runs one refinement epoch over a snapshot of the scene:
  1. prune: opacity below ε_o, non-finite parameters, or κ > κ_max
  2. gradient densify: clone small Gaussians, split large ones by 1.6
  3. spectral split: low-entropy Gaussians not already split in step 2
It returns the new scene and, per new row, the source row it continues
(−1 for newly created Gaussians) so optimizer state can be remapped.
"""

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from spectral_splat.core.scene import Gaussian3D, GaussianScene, quaternion_to_rotation
from spectral_splat.core.spectral import SymMat, eig_sym, entropy_from_eigenvalues, spectral_entropy
from spectral_splat.utils.config import DensifyConfig
from spectral_splat.utils.errors import DegenerateCovarianceError, DegenerateError
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

TIE_RTOL = 1e-9
K_CLAMP_FRACTION = 0.95


@dataclass
class DensifyStats:
    cloned: int = 0
    split_baseline: int = 0
    split_spectral: int = 0
    pruned_opacity: int = 0
    pruned_spectrum: int = 0
    k_clamped: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RefineResult:
    scene: GaussianScene
    source: np.ndarray  # (N_new,) row in the old scene, −1 for new Gaussians
    stats: DensifyStats


# ─── Predicates ─────────────────────────────────────────────────────────────

def should_split_spectral(cov: SymMat, tau_spectral: float) -> bool:
    return spectral_entropy(cov) < tau_spectral


def split_k_bound(cov: SymMat, k0: float) -> float:
    """Largest k keeping κ from growing: −k₀ + k₀·ρ^{3/2}/√|Σ|."""
    lam = eig_sym(cov).eigenvalues
    det = float(np.prod(lam))
    if not det > 0.0:
        raise DegenerateError(f"split_k_bound needs |Σ| > 0, got {det:.3e}")
    return -k0 + k0 * float(lam[0]) ** 1.5 / math.sqrt(det)


def _k_bounds(log_scales: np.ndarray, k0: float) -> np.ndarray:
    # ρ^{3/2}/√|Σ| = exp(3·max(l) − Σl) in log-scale terms
    return -k0 + k0 * np.exp(3.0 * np.max(log_scales, axis=1) - np.sum(log_scales, axis=1))


def _invalid_spectrum(scene: GaussianScene, kappa_max: float) -> np.ndarray:
    finite = (
        np.all(np.isfinite(scene.positions), axis=1)
        & np.all(np.isfinite(scene.log_scales), axis=1)
        & np.all(np.isfinite(scene.rotations), axis=1)
        & np.isfinite(scene.opacity_logits)
        & (np.linalg.norm(scene.rotations, axis=1) > 0)
    )
    spread = np.max(scene.log_scales, axis=1) - np.min(scene.log_scales, axis=1)
    with np.errstate(invalid="ignore", over="ignore"):
        too_anisotropic = np.exp(2.0 * spread) > kappa_max
    return ~finite | too_anisotropic


def prune(g: Gaussian3D, cfg: DensifyConfig) -> bool:
    """True when g should be removed."""
    scene = GaussianScene.from_gaussians([g])
    if not np.isfinite(g.opacity_logit):
        return True
    return bool(scene.opacities()[0] < cfg.eps_o or _invalid_spectrum(scene, cfg.kappa_max)[0])


# ─── Children ───────────────────────────────────────────────────────────────

def _spectral_children(
    scene: GaussianScene, rows: np.ndarray, cfg: DensifyConfig, rng: np.random.Generator
) -> Tuple[GaussianScene, int]:
    """K children per row with the axes at ρ shrunk by (k + k₀), the rest by k₀."""
    if rows.size == 0:
        return GaussianScene.empty(), 0
    log_scales = scene.log_scales[rows]
    bounds = _k_bounds(log_scales, cfg.k0)
    k = np.full(rows.shape[0], cfg.k)
    clamp = k >= bounds
    k[clamp] = np.clip(K_CLAMP_FRACTION * bounds[clamp], 0.0, None)

    var = np.exp(2.0 * log_scales)
    at_rho = var >= np.max(var, axis=1, keepdims=True) * (1.0 - TIE_RTOL)
    factors = k[:, None] * at_rho + cfg.k0

    covs = scene.covariances()[rows]
    try:
        chol = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as e:
        raise DegenerateCovarianceError("Cannot sample children: parent covariance is not positive definite") from e
    z = rng.standard_normal((rows.shape[0], cfg.K, 3))
    offsets = np.einsum("nij,nkj->nki", chol, z)

    children = scene.select(np.repeat(rows, cfg.K))
    children.positions = (scene.positions[rows][:, None, :] + offsets).reshape(-1, 3)
    children.log_scales = np.repeat(log_scales - np.log(factors), cfg.K, axis=0)
    return children, int(np.count_nonzero(clamp))


def _baseline_split_children(
    scene: GaussianScene, rows: np.ndarray, cfg: DensifyConfig, rng: np.random.Generator
) -> GaussianScene:
    """Two children sampled from the parent density, every axis shrunk by 1.6."""
    if rows.size == 0:
        return GaussianScene.empty()
    n_children = 2
    rot = quaternion_to_rotation(scene.rotations[rows])
    scales = np.exp(scene.log_scales[rows])
    z = rng.standard_normal((rows.shape[0], n_children, 3))
    offsets = np.einsum("nij,nkj->nki", rot, z * scales[:, None, :])

    children = scene.select(np.repeat(rows, n_children))
    children.positions = (scene.positions[rows][:, None, :] + offsets).reshape(-1, 3)
    children.log_scales = np.repeat(scene.log_scales[rows] - math.log(cfg.baseline_split_factor), n_children, axis=0)
    return children


def _clones(scene: GaussianScene, rows: np.ndarray, grad_dirs: Optional[np.ndarray]) -> GaussianScene:
    """Copies nudged one minimum scale against the accumulated position gradient."""
    clones = scene.select(rows)
    if grad_dirs is None or rows.size == 0:
        return clones
    d = grad_dirs[rows]
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    unit = np.divide(d, norm, out=np.zeros_like(d), where=norm > 0)
    min_scale = np.exp(np.min(scene.log_scales[rows], axis=1, keepdims=True))
    clones.positions = clones.positions - min_scale * unit
    return clones


def spectral_split(g: Gaussian3D, cfg: DensifyConfig, rng: np.random.Generator) -> List[Gaussian3D]:
    """Replace g with cfg.K shape-corrected children."""
    children, clamped = _spectral_children(GaussianScene.from_gaussians([g]), np.array([0]), cfg, rng)
    if clamped:
        logger.warning(f"spectral_split: k={cfg.k} is not below the bound; using {K_CLAMP_FRACTION}·bound")
    return list(children)


def baseline_densify(
    g: Gaussian3D,
    grad_norm: float,
    cfg: DensifyConfig,
    rng: np.random.Generator,
    scene_extent: float,
    grad_direction: Optional[np.ndarray] = None,
) -> Tuple[str, List[Gaussian3D]]:
    """
    Gradient-driven densification of one Gaussian.

    Returns:
        ("none", [g]), ("clone", [g, copy]) or ("split", [child, child]).
    """
    if not grad_norm > cfg.tau_loss:
        return "none", [g]
    scene = GaussianScene.from_gaussians([g])
    rows = np.array([0])
    if float(np.max(scene.variances())) > cfg.radius_threshold(scene_extent):
        return "split", list(_baseline_split_children(scene, rows, cfg, rng))
    dirs = None if grad_direction is None else np.asarray(grad_direction, dtype=np.float64).reshape(1, 3)
    return "clone", [g, _clones(scene, rows, dirs)[0]]


# ─── Refinement epoch ───────────────────────────────────────────────────────

def refine(
    scene: GaussianScene,
    grad_norms: np.ndarray,
    cfg: DensifyConfig,
    rng: np.random.Generator,
    scene_extent: float,
    spectral: bool = True,
    grad_dirs: Optional[np.ndarray] = None,
) -> RefineResult:
    """
    One refinement epoch: prune, gradient densify, spectral split.

    Args:
        scene: Current Gaussians.
        grad_norms: (N,) mean view-space positional gradient norm per Gaussian.
        cfg: Densification thresholds.
        rng: Seeded generator used for child sampling.
        scene_extent: Scene radius, sets the clone/split size threshold.
        spectral: Run the spectral split step.
        grad_dirs: (N, 3) accumulated world-space position gradients for clone nudging.
    """
    stats = DensifyStats()
    n = len(scene)
    if n == 0:
        return RefineResult(scene=scene, source=np.zeros(0, dtype=np.int64), stats=stats)

    grad_norms = np.nan_to_num(np.asarray(grad_norms, dtype=np.float64), nan=0.0)
    opacity = scene.opacities()
    low_opacity = ~(opacity >= cfg.eps_o)
    invalid = _invalid_spectrum(scene, cfg.kappa_max) & ~low_opacity
    alive = ~(low_opacity | invalid)
    stats.pruned_opacity = int(np.count_nonzero(low_opacity))
    stats.pruned_spectrum = int(np.count_nonzero(invalid))

    with np.errstate(invalid="ignore", over="ignore"):
        var = scene.variances()
        hot = alive & (grad_norms > cfg.tau_loss)
        big = np.max(var, axis=1) > cfg.radius_threshold(scene_extent)
        entropy = entropy_from_eigenvalues(var)
    split_b = hot & big
    clone = hot & ~big
    split_s = alive & ~split_b & (entropy < cfg.tau_spectral) if spectral else np.zeros(n, dtype=bool)
    keep = alive & ~split_b & ~split_s

    clone_rows = np.nonzero(clone)[0]
    b_rows = np.nonzero(split_b)[0]
    s_rows = np.nonzero(split_s)[0]

    kept = scene.select(keep)
    clones = _clones(scene, clone_rows, grad_dirs)
    b_children = _baseline_split_children(scene, b_rows, cfg, rng)
    s_children, clamped = _spectral_children(scene, s_rows, cfg, rng)

    new_scene = kept.concat(clones).concat(b_children).concat(s_children)
    source = np.concatenate(
        [np.nonzero(keep)[0], np.full(len(clones) + len(b_children) + len(s_children), -1)]
    ).astype(np.int64)

    stats.cloned = int(clone_rows.size)
    stats.split_baseline = int(b_rows.size)
    stats.split_spectral = int(s_rows.size)
    stats.k_clamped = clamped
    if clamped:
        logger.warning(
            f"refine: k={cfg.k} not below the κ bound for {clamped} Gaussian(s); used {K_CLAMP_FRACTION}·bound"
        )
    logger.info(
        f"refine: {n} → {len(new_scene)} Gaussians "
        f"(clone {stats.cloned}, split {stats.split_baseline}, spectral {stats.split_spectral}, "
        f"pruned {stats.pruned_opacity}+{stats.pruned_spectrum})"
    )
    return RefineResult(scene=new_scene, source=source, stats=stats)
