"""
CPU tile-based rasterizer with front-to-back α-blending.

Splats are sorted by (depth, source index). Each tile takes the sorted
splats whose bounding box overlaps it and blends them as one (K, h, w)
stack. A pixel's value depends only on the splats that touch it and their
order, so the output is bit-identical for any tile size and thread count.

The forward pass can record a tape (per tile: α, transmittance in front of
each splat and the Gaussian falloff) consumed by render/backward.py.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from spectral_splat.core.filters import (
    FilterKind,
    FilterMode,
    FilteredBatch,
    FilteredSplat,
    SmoothedAttributes,
    exact_kernels_batch,
    filter_batch,
    smoothing_filter_3d_batch,
)
from spectral_splat.core.scene import (
    SH_C0,
    CameraView,
    GaussianScene,
    ProjectedBatch,
    Splat2D,
    compose_covariances,
    project_batch,
    sigmoid,
)
from spectral_splat.core.spectral import LN3, eigvals_sym2, entropy_from_eigenvalues
from spectral_splat.utils.config import RenderConfig
from spectral_splat.utils.errors import SingularCovarianceError
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class Framebuffer:
    width: int
    height: int
    rgb: np.ndarray    # (H, W, C), C = 3 for color renders, 1 for scalar maps
    alpha: np.ndarray  # (H, W)

    @classmethod
    def blank(cls, width: int, height: int, background: Sequence[float]) -> "Framebuffer":
        bg = np.asarray(background, dtype=np.float64)
        rgb = np.broadcast_to(bg, (height, width, bg.shape[0])).copy()
        return cls(width=width, height=height, rgb=rgb, alpha=np.zeros((height, width)))

    def to_uint8(self) -> np.ndarray:
        img = np.floor(np.clip(self.rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        return img[..., 0] if img.shape[-1] == 1 else img


@dataclass
class SplatBatch:
    """Filtered splats ready to rasterize. `features` is RGB or any per-splat channel vector."""

    means: np.ndarray      # (M, 2)
    covs: np.ndarray       # (M, 2, 2)
    opacities: np.ndarray  # (M,)
    features: np.ndarray   # (M, C)
    depths: np.ndarray     # (M,)
    ids: np.ndarray        # (M,)

    def __len__(self) -> int:
        return self.means.shape[0]

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[Splat2D, FilteredSplat]]) -> "SplatBatch":
        if not pairs:
            return cls(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
                       np.zeros(0, dtype=np.int64))
        return cls(
            means=np.stack([s.mean for s, _ in pairs]),
            covs=np.stack([f.cov for _, f in pairs]),
            opacities=np.array([f.opacity for _, f in pairs]),
            features=np.stack([np.asarray(s.color, dtype=np.float64) for s, _ in pairs]),
            depths=np.array([s.depth for s, _ in pairs]),
            ids=np.array([s.source_index if s.source_index >= 0 else i for i, (s, _) in enumerate(pairs)]),
        )


@dataclass
class TileRecord:
    """Per-tile blend state; every array is (K, h, w) over the tile, K = len(splats)."""

    bounds: Tuple[int, int, int, int]  # y0, y1, x0, x1
    splats: np.ndarray    # (K,) batch rows in blend order
    alpha: np.ndarray     # applied α, 0 where the splat does not contribute
    t_before: np.ndarray  # transmittance in front of each splat
    gauss: np.ndarray     # exp(−½ d²)


@dataclass
class RasterTape:
    batch: SplatBatch
    conics: np.ndarray           # (M, 3) q00, q01, q11 of Σ_filter⁻¹
    background: np.ndarray       # (C,)
    final_transmittance: np.ndarray  # (H, W)
    tiles: List[TileRecord]
    cfg: RenderConfig


def _tile_bounds(width: int, height: int, ts: int) -> List[Tuple[int, int, int, int]]:
    return [
        (y, min(y + ts, height), x, min(x + ts, width))
        for y in range(0, height, ts)
        for x in range(0, width, ts)
    ]


def _conics(covs: np.ndarray) -> np.ndarray:
    a, b, c = covs[:, 0, 0], covs[:, 0, 1], covs[:, 1, 1]
    det = a * c - b * b
    bad = ~np.isfinite(det) | (det <= 0.0)
    if np.any(bad):
        raise SingularCovarianceError(
            f"{int(np.count_nonzero(bad))} filtered covariance(s) are not invertible"
        )
    return np.stack([c / det, -b / det, a / det], axis=-1)


def _bin_splats(bounds: List[Tuple[int, int, int, int]], boxes: np.ndarray, order: np.ndarray) -> List[np.ndarray]:
    """Sorted splat rows whose bounding box overlaps each tile."""
    tiles = np.asarray(bounds, dtype=np.int64).reshape(-1, 4)
    sb = boxes[order]
    nonempty = (sb[:, 0] < sb[:, 1]) & (sb[:, 2] < sb[:, 3])
    overlap = (
        nonempty[None, :]
        & (sb[None, :, 0] < tiles[:, 3, None])
        & (sb[None, :, 1] > tiles[:, 2, None])
        & (sb[None, :, 2] < tiles[:, 1, None])
        & (sb[None, :, 3] > tiles[:, 0, None])
    )
    return [order[row] for row in overlap]


def _render_tile(
    bounds: Tuple[int, int, int, int],
    splats: np.ndarray,
    boxes: np.ndarray,
    batch: SplatBatch,
    conics: np.ndarray,
    cfg: RenderConfig,
    channels: int,
    record: bool,
) -> Tuple[np.ndarray, np.ndarray, Optional[TileRecord]]:
    """
    Blend one tile. Products and sums run in blend order with np.*.accumulate,
    and splats that miss a pixel contribute exact identities there, so each
    pixel sees the same arithmetic whatever the tiling.
    """
    ty0, ty1, tx0, tx1 = bounds
    h, w = ty1 - ty0, tx1 - tx0
    if splats.size == 0:
        empty = np.zeros((0, h, w))
        rec = TileRecord(bounds, splats, empty, empty, empty) if record else None
        return np.zeros((h, w, channels)), np.ones((h, w)), rec

    xs = np.arange(tx0, tx1, dtype=np.float64)[None, None, :]
    ys = np.arange(ty0, ty1, dtype=np.float64)[None, :, None]
    dx = xs - batch.means[splats, 0][:, None, None]  # (K, 1, w)
    dy = ys - batch.means[splats, 1][:, None, None]  # (K, h, 1)
    q = conics[splats][:, :, None, None]
    d2 = q[:, 0] * dx * dx + 2.0 * q[:, 1] * dx * dy + q[:, 2] * dy * dy
    gauss = np.exp(-0.5 * d2)
    alpha = np.minimum(batch.opacities[splats][:, None, None] * gauss, cfg.alpha_max)

    box = boxes[splats][:, :, None, None]
    inside = (xs >= box[:, 0]) & (xs < box[:, 1]) & (ys >= box[:, 2]) & (ys < box[:, 3])
    alpha[(d2 > cfg.gaussian_cutoff) | (alpha < cfg.alpha_min) | ~inside] = 0.0

    ones = np.ones((1, h, w))
    trans = np.multiply.accumulate(1.0 - alpha, axis=0)
    t_before = np.concatenate([ones, trans[:-1]], axis=0)
    # a pixel stops after the contribution that drops T below the floor
    spent = t_before < cfg.transmittance_min
    if spent.any():
        alpha[spent] = 0.0
        trans = np.multiply.accumulate(1.0 - alpha, axis=0)
        t_before = np.concatenate([ones, trans[:-1]], axis=0)

    weight = alpha * t_before
    color = np.add.accumulate(weight[..., None] * batch.features[splats][:, None, None, :], axis=0)[-1]
    rec = TileRecord(bounds, splats, alpha, t_before, gauss) if record else None
    return color, trans[-1], rec


def _rasterize(
    batch: SplatBatch,
    width: int,
    height: int,
    cfg: RenderConfig,
    background: Optional[Sequence[float]],
    record: bool,
) -> Tuple[Framebuffer, Optional[RasterTape]]:
    bg = np.asarray(cfg.background if background is None else background, dtype=np.float64)
    channels = bg.shape[0]
    m = len(batch)
    conics = _conics(batch.covs) if m else np.zeros((0, 3))

    # Bounding boxes over integer pixel centres, half-open
    lam_max, _ = eigvals_sym2(batch.covs[:, 0, 0], batch.covs[:, 0, 1], batch.covs[:, 1, 1])
    radius = np.ceil(np.sqrt(cfg.gaussian_cutoff * np.clip(lam_max, 0.0, None)))
    mx, my = batch.means[:, 0], batch.means[:, 1]
    boxes = np.stack(
        [
            np.clip(np.ceil(mx - radius), 0, width),
            np.clip(np.floor(mx + radius) + 1, 0, width),
            np.clip(np.ceil(my - radius), 0, height),
            np.clip(np.floor(my + radius) + 1, 0, height),
        ],
        axis=-1,
    ).astype(np.int64) if m else np.zeros((0, 4), dtype=np.int64)

    order = np.lexsort((np.arange(m), batch.ids, batch.depths))
    bounds = _tile_bounds(width, height, cfg.tile_size)
    bins = _bin_splats(bounds, boxes, order)

    def work(i):
        return _render_tile(bounds[i], bins[i], boxes, batch, conics, cfg, channels, record)

    if cfg.threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(work, range(len(bounds))))
    else:
        results = [work(i) for i in range(len(bounds))]

    rgb = np.empty((height, width, channels))
    trans = np.empty((height, width))
    for (y0, y1, x0, x1), (color, t, _) in zip(bounds, results):
        rgb[y0:y1, x0:x1] = color + t[..., None] * bg
        trans[y0:y1, x0:x1] = t

    fb = Framebuffer(width=width, height=height, rgb=rgb, alpha=1.0 - trans)
    tape = None
    if record:
        tape = RasterTape(batch=batch, conics=conics, background=bg, final_transmittance=trans,
                          tiles=[rec for _, _, rec in results], cfg=cfg)
    return fb, tape


def rasterize(
    splats,
    width: int,
    height: int,
    cfg: Optional[RenderConfig] = None,
    background: Optional[Sequence[float]] = None,
) -> Framebuffer:
    """
    Blend filtered splats front to back into a framebuffer.

    Args:
        splats: SplatBatch, or a sequence of (Splat2D, FilteredSplat) pairs.
        width, height: Image size in pixels.
        cfg: Rasterizer settings.
        background: Overrides cfg.background; its length sets the channel count.

    Raises:
        SingularCovarianceError: if a filtered covariance is not invertible.
    """
    batch = splats if isinstance(splats, SplatBatch) else SplatBatch.from_pairs(list(splats))
    fb, _ = _rasterize(batch, width, height, cfg or RenderConfig(), background, record=False)
    return fb


def rasterize_with_tape(
    batch: SplatBatch,
    width: int,
    height: int,
    cfg: Optional[RenderConfig] = None,
    background: Optional[Sequence[float]] = None,
) -> Tuple[Framebuffer, RasterTape]:
    return _rasterize(batch, width, height, cfg or RenderConfig(), background, record=True)


# ─── Scene → image pipeline ─────────────────────────────────────────────────

@dataclass
class RenderContext:
    """Everything the backward pass needs to chain screen gradients to parameters."""

    view: CameraView
    mode: FilterMode
    projection: ProjectedBatch
    filtered: FilteredBatch
    smoothing: Optional[SmoothedAttributes]
    variances: np.ndarray     # (N, 3) per-axis variances fed to the projection
    base_opacity: np.ndarray  # (M,) σ(logit) of visible splats
    smooth_scale: np.ndarray  # (M,) 3D-smoothing opacity factor of visible splats
    raw_color: np.ndarray     # (M, 3) 0.5 + C0·f_dc before clamping
    exact_mask: Optional[np.ndarray] = None


@dataclass
class RenderResult:
    framebuffer: Framebuffer
    tape: Optional[RasterTape]
    context: RenderContext


def render(
    scene: GaussianScene,
    view: CameraView,
    mode: FilterMode,
    cfg: Optional[RenderConfig] = None,
    smoothing_s: Optional[float] = None,
    training_views: Optional[Sequence[CameraView]] = None,
    record: bool = False,
) -> RenderResult:
    """
    Cull → project → filter → rasterize.

    Args:
        scene: Gaussians to draw.
        view: Rendering camera.
        mode: Screen-space filter.
        cfg: Rasterizer settings.
        smoothing_s: When set, apply the 3D smoothing filter with this s first.
        training_views: Views indexed by scene.sampling_view, for the exact
                        view-consistent path.
        record: Keep the tape for a backward pass.
    """
    cfg = cfg or RenderConfig()
    smoothing = None
    if smoothing_s is not None:
        smoothing = smoothing_filter_3d_batch(scene.log_scales, scene.max_sampling_rate, smoothing_s)
        variances = smoothing.variances
    else:
        variances = scene.variances()

    covs = compose_covariances(scene.rotations, variances) if len(scene) else np.zeros((0, 3, 3))
    proj = project_batch(scene.positions, covs, view, near=cfg.near, margin=cfg.cull_margin)
    idx = proj.indices

    base_opacity = sigmoid(scene.opacity_logits[idx])
    smooth_scale = smoothing.opacity_scale[idx] if smoothing is not None else np.ones(len(idx))

    exact_kernels = exact_mask = None
    if mode.kind is FilterKind.VIEW_CONSISTENT and mode.exact and training_views:
        world_jac = np.einsum("nij,jk->nik", proj.jacobian, view.rotation)
        exact_kernels, exact_mask = exact_kernels_batch(
            idx, world_jac, scene.positions, scene.sampling_view, scene.max_sampling_rate,
            training_views, mode.s0,
        )

    filtered = filter_batch(
        proj.cov2d,
        base_opacity * smooth_scale,
        proj.depths,
        mode,
        view.fx,
        ref_ratios=scene.max_sampling_rate[idx],
        exact_kernels=exact_kernels,
        exact_mask=exact_mask,
    )

    raw_color = 0.5 + SH_C0 * scene.f_dc[idx]
    batch = SplatBatch(
        means=proj.mean2d,
        covs=filtered.cov,
        opacities=filtered.opacity,
        features=np.clip(raw_color, 0.0, 1.0),
        depths=proj.depths,
        ids=idx,
    )
    fb, tape = _rasterize(batch, view.width, view.height, cfg, None, record)
    logger.debug(
        f"render: {len(idx)}/{len(scene)} visible, {proj.culled_behind} behind, "
        f"{proj.culled_outside} off-screen, filter {mode.describe()}"
    )
    context = RenderContext(
        view=view,
        mode=mode,
        projection=proj,
        filtered=filtered,
        smoothing=smoothing,
        variances=variances,
        base_opacity=base_opacity,
        smooth_scale=smooth_scale,
        raw_color=raw_color,
        exact_mask=exact_mask,
    )
    return RenderResult(framebuffer=fb, tape=tape, context=context)


def splat_and_render(
    scene: GaussianScene,
    view: CameraView,
    mode: FilterMode,
    cfg: Optional[RenderConfig] = None,
    smoothing_s: Optional[float] = None,
    training_views: Optional[Sequence[CameraView]] = None,
) -> Framebuffer:
    return render(scene, view, mode, cfg, smoothing_s, training_views).framebuffer


def render_entropy_map(
    scene: GaussianScene,
    view: CameraView,
    mode: FilterMode,
    cfg: Optional[RenderConfig] = None,
) -> Framebuffer:
    """
    Blend each splat's 3D spectral entropy instead of its color.

    Covered pixels hold the alpha-normalized entropy; uncovered pixels hold
    the ln 3 sentinel (their alpha stays 0, so callers can tell them apart).
    """
    result = render(scene, view, mode, cfg)
    ctx = result.context
    idx = ctx.projection.indices
    entropy = entropy_from_eigenvalues(ctx.variances[idx])[:, None] if len(idx) else np.zeros((0, 1))
    batch = SplatBatch(
        means=ctx.projection.mean2d,
        covs=ctx.filtered.cov,
        opacities=ctx.filtered.opacity,
        features=entropy,
        depths=ctx.projection.depths,
        ids=idx,
    )
    fb, _ = _rasterize(batch, view.width, view.height, cfg or RenderConfig(), [0.0], record=False)
    covered = fb.alpha > 0.0
    values = np.full((view.height, view.width), LN3)
    values[covered] = fb.rgb[covered, 0] / fb.alpha[covered]
    return Framebuffer(width=fb.width, height=fb.height, rgb=values[..., None], alpha=fb.alpha)


def filtered_spectra(result: RenderResult) -> np.ndarray:
    """Descending eigenvalues (M, 2) of every visible Σ_filter."""
    cov = result.context.filtered.cov
    hi, lo = eigvals_sym2(cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1])
    return np.stack([hi, lo], axis=-1)
