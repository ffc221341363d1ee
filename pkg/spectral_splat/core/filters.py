"""
Low-pass filters for splats.

Four screen/object-space filters are supported:
  - EWA:   Σ + sI, opacity unchanged
  - Mip:   Σ + sI, opacity scaled by √(|Σ| / |Σ + sI|)
  - 3D smoothing: Σ₃ + (s/ν̂²)I in object space, same determinant-ratio opacity
  - View-consistent: kernel s₀·(f/μ_z)², so filtered anisotropy is zoom-invariant

The batched variants at the bottom are what the renderer runs; the scalar
ones are the reference forms.
"""

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from spectral_splat.core.scene import (
    NEAR,
    CameraView,
    Gaussian3D,
    Splat2D,
    in_view,
    inverse_sigmoid,
    project,
    project_batch,
)
from spectral_splat.core.spectral import SymMat, spectral_entropy
from spectral_splat.utils.errors import (
    BehindCameraError,
    DomainError,
    NoVisibilityError,
    RankDeficientError,
)
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_EWA_S = 0.3
DEFAULT_MIP_S = 0.1
DEFAULT_VC_S0 = 0.1
DEFAULT_SMOOTHING_S = 0.2


class FilterKind(str, enum.Enum):
    NONE = "none"
    EWA = "ewa"
    MIP = "mip"
    VIEW_CONSISTENT = "view-consistent"

    @classmethod
    def parse(cls, name: str) -> "FilterKind":
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            known = ", ".join(k.value for k in cls)
            raise DomainError(f"Unknown filter '{name}'. Expected one of: {known}") from None


@dataclass(frozen=True)
class FilterMode:
    kind: FilterKind = FilterKind.NONE
    s: float = 0.0
    s0: float = DEFAULT_VC_S0
    exact: bool = False

    def __post_init__(self):
        if self.kind in (FilterKind.EWA, FilterKind.MIP) and not self.s > 0:
            raise DomainError(f"{self.kind.value} filter needs s > 0, got {self.s}")
        if self.kind is FilterKind.VIEW_CONSISTENT and not self.s0 > 0:
            raise DomainError(f"view-consistent filter needs s0 > 0, got {self.s0}")

    @classmethod
    def none(cls) -> "FilterMode":
        return cls(FilterKind.NONE)

    @classmethod
    def ewa(cls, s: float = DEFAULT_EWA_S) -> "FilterMode":
        return cls(FilterKind.EWA, s=s)

    @classmethod
    def mip(cls, s: float = DEFAULT_MIP_S) -> "FilterMode":
        return cls(FilterKind.MIP, s=s)

    @classmethod
    def view_consistent(cls, s0: float = DEFAULT_VC_S0, exact: bool = False) -> "FilterMode":
        return cls(FilterKind.VIEW_CONSISTENT, s0=s0, exact=exact)

    @classmethod
    def from_name(
        cls, name: str, s: Optional[float] = None, s0: float = DEFAULT_VC_S0, exact: bool = False
    ) -> "FilterMode":
        kind = FilterKind.parse(name)
        if kind is FilterKind.EWA:
            return cls.ewa(DEFAULT_EWA_S if s is None else s)
        if kind is FilterKind.MIP:
            return cls.mip(DEFAULT_MIP_S if s is None else s)
        if kind is FilterKind.VIEW_CONSISTENT:
            return cls.view_consistent(s0, exact)
        return cls.none()

    @property
    def rescales_opacity(self) -> bool:
        return self.kind in (FilterKind.MIP, FilterKind.VIEW_CONSISTENT)

    def describe(self) -> str:
        if self.kind is FilterKind.VIEW_CONSISTENT:
            return f"view-consistent(s0={self.s0}{', exact' if self.exact else ''})"
        if self.kind is FilterKind.NONE:
            return "none"
        return f"{self.kind.value}(s={self.s})"


@dataclass(frozen=True)
class FilteredSplat:
    cov: SymMat
    opacity: float
    kernel: float = 0.0


# ─── Screen-space filters ───────────────────────────────────────────────────

def _det2(m: np.ndarray) -> float:
    return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def _opacity_ratio(cov: np.ndarray, filtered: np.ndarray) -> float:
    det_p = max(_det2(cov), 0.0)
    det_f = _det2(filtered)
    if det_f <= 0.0:
        return 0.0
    return math.sqrt(det_p / det_f)


def ewa_filter(splat: Splat2D, s: float) -> FilteredSplat:
    if not s > 0:
        raise DomainError(f"EWA kernel must be positive, got {s}")
    return FilteredSplat(cov=splat.cov + s * np.eye(2), opacity=splat.opacity, kernel=s)


def mip_filter_2d(splat: Splat2D, s: float) -> FilteredSplat:
    if not s > 0:
        raise DomainError(f"Mip kernel must be positive, got {s}")
    cov = splat.cov + s * np.eye(2)
    return FilteredSplat(cov=cov, opacity=splat.opacity * _opacity_ratio(splat.cov, cov), kernel=s)


def view_consistent_kernel(s0: float, f: float, depth: float, ref_ratio: Optional[float] = None) -> float:
    """s_eff = s₀·(f/μ_z)², held at s₀·ref_ratio² when the view samples more coarsely."""
    if depth <= NEAR:
        raise BehindCameraError(f"Depth {depth:.4g} is not beyond the near plane {NEAR}")
    ratio = f / depth
    if ref_ratio is not None and ratio < ref_ratio:
        ratio = ref_ratio
    return s0 * ratio * ratio


def view_consistent_filter(
    splat: Splat2D, s0: float, f: float, ref_ratio: Optional[float] = None
) -> FilteredSplat:
    """
    View-adaptive kernel filter.

    Args:
        splat: Projected splat (depth is μ_z).
        s0: Kernel coefficient in px² at unit sampling ratio.
        f: Focal length of the rendering view in pixels.
        ref_ratio: Training-time sampling ratio ν̂; views sampling below it reuse it.

    Returns:
        FilteredSplat with Mip-style opacity compensation.
    """
    if not s0 > 0:
        raise DomainError(f"s0 must be positive, got {s0}")
    s_eff = view_consistent_kernel(s0, f, splat.depth, ref_ratio)
    cov = splat.cov + s_eff * np.eye(2)
    return FilteredSplat(cov=cov, opacity=splat.opacity * _opacity_ratio(splat.cov, cov), kernel=s_eff)


def right_pseudo_inverse(jac: np.ndarray) -> np.ndarray:
    """J⁺ = Jᵀ(JJᵀ)⁻¹ for a 2×3 Jacobian of full row rank."""
    jac = np.asarray(jac, dtype=np.float64)
    gram = jac @ jac.T
    det = _det2(gram)
    if not det > 1e-300 * max(1.0, float(np.max(np.abs(gram))) ** 2):
        raise RankDeficientError("Training Jacobian does not have full row rank")
    return jac.T @ np.linalg.inv(gram)


def blur_kernel(j_test: np.ndarray, j_train_pinv: np.ndarray, s: float) -> SymMat:
    """(J_test·J_train⁺)·sI·(J_test·J_train⁺)ᵀ − sI. Indefinite when the test view zooms out."""
    j_test = np.asarray(j_test, dtype=np.float64)
    j_train_pinv = np.asarray(j_train_pinv, dtype=np.float64)
    if j_test.shape != (2, 3) or j_train_pinv.shape != (3, 2):
        raise DomainError("blur_kernel expects J_test 2×3 and J_train⁺ 3×2")
    if not np.all(np.isfinite(j_train_pinv)):
        raise RankDeficientError("Training pseudo-inverse is not finite")
    a = j_test @ j_train_pinv
    k = s * (a @ a.T) - s * np.eye(2)
    return 0.5 * (k + k.T)


def view_consistent_filter_exact(
    splat: Splat2D, j_test: np.ndarray, j_train: np.ndarray, s: float
) -> FilteredSplat:
    """
    Exact view-consistent filter with a stored training Jacobian.

    The total kernel is sI + blur_kernel(...), i.e. the training kernel mapped
    into the test view. When the mapped kernel is smaller than sI in some
    direction (zoom-out) it is clamped back to sI.
    """
    extra = blur_kernel(j_test, right_pseudo_inverse(j_train), s)
    if np.linalg.eigvalsh(extra)[0] < 0.0:
        extra = np.zeros((2, 2))
    kernel = s * np.eye(2) + extra
    cov = splat.cov + kernel
    return FilteredSplat(
        cov=cov, opacity=splat.opacity * _opacity_ratio(splat.cov, cov), kernel=float(np.trace(kernel) / 2.0)
    )


def apply_filter(
    splat: Splat2D,
    mode: FilterMode,
    f: Optional[float] = None,
    ref_ratio: Optional[float] = None,
    j_test: Optional[np.ndarray] = None,
    j_train: Optional[np.ndarray] = None,
) -> FilteredSplat:
    """Dispatch on the filter kind."""
    if mode.kind is FilterKind.EWA:
        return ewa_filter(splat, mode.s)
    if mode.kind is FilterKind.MIP:
        return mip_filter_2d(splat, mode.s)
    if mode.kind is FilterKind.VIEW_CONSISTENT:
        if mode.exact and j_test is not None and j_train is not None:
            return view_consistent_filter_exact(splat, j_test, j_train, mode.s0 * (ref_ratio or 1.0) ** 2)
        if f is None:
            raise DomainError("view-consistent filter needs the focal length")
        return view_consistent_filter(splat, mode.s0, f, ref_ratio)
    return FilteredSplat(cov=splat.cov, opacity=splat.opacity)


# ─── Object-space smoothing ─────────────────────────────────────────────────

def smoothing_filter_3d(g: Gaussian3D, s: float) -> Gaussian3D:
    """
    Add (s/ν̂²)·I to the Gaussian's covariance in its own eigenbasis.

    Raises:
        NoVisibilityError: if ν̂ was never set (no training view saw the Gaussian).
    """
    if g.max_sampling_rate is None or not g.max_sampling_rate > 0:
        raise NoVisibilityError("3D smoothing needs a max sampling rate; no training view saw this Gaussian")
    var_add = s / g.max_sampling_rate ** 2
    var = np.exp(2.0 * g.log_scales)
    new_var = var + var_add
    ratio = math.sqrt(float(np.prod(var / new_var)))
    return replace(
        g,
        log_scales=0.5 * np.log(new_var),
        opacity_logit=float(inverse_sigmoid(g.opacity * ratio)),
    )


def smoothing_filter_entropy_gain(cov: SymMat, variance: float) -> float:
    """H(Σ + vI) − H(Σ); never negative for v ≥ 0."""
    return spectral_entropy(cov + variance * np.eye(cov.shape[0])) - spectral_entropy(cov)


def update_max_sampling_rate(
    g: Gaussian3D, views: Sequence[CameraView], near: float = NEAR
) -> Gaussian3D:
    """ν̂ = max over views where g is not culled of f_x/μ_z; unset if none see it."""
    if not views:
        raise DomainError("update_max_sampling_rate needs at least one view")
    best, best_view = None, -1
    for i, v in enumerate(views):
        try:
            splat = project(g, v, near=near)
        except BehindCameraError:
            continue
        if not in_view(splat.mean, splat.cov, v)[0]:
            continue
        rate = v.fx / splat.depth
        if best is None or rate > best:
            best, best_view = rate, i
    return replace(g, max_sampling_rate=best, sampling_view=best_view)


def update_sampling_rates(scene, views: Sequence[CameraView], near: float = NEAR) -> None:
    """Batched ν̂ refresh over a GaussianScene, in place."""
    n = len(scene)
    rate = np.full(n, np.nan)
    best_view = np.full(n, -1, dtype=np.int64)
    covs = scene.covariances()
    for i, v in enumerate(views):
        batch = project_batch(scene.positions, covs, v, near=near)
        r = v.fx / batch.depths
        cur = rate[batch.indices]
        better = np.isnan(cur) | (r > cur)
        rate[batch.indices[better]] = r[better]
        best_view[batch.indices[better]] = i
    scene.max_sampling_rate = rate
    scene.sampling_view = best_view
    unseen = int(np.count_nonzero(np.isnan(rate)))
    if unseen:
        logger.debug(f"update_sampling_rates: {unseen}/{n} Gaussian(s) unseen by every view")


# ─── Batched forms used by the renderer ─────────────────────────────────────

@dataclass
class SmoothedAttributes:
    variances: np.ndarray     # (N, 3) per-axis variances after smoothing
    opacity_scale: np.ndarray  # (N,) determinant-ratio factor
    added: np.ndarray          # (N,) variance added (0 where ν̂ unset)


def smoothing_filter_3d_batch(log_scales: np.ndarray, rates: np.ndarray, s: float) -> SmoothedAttributes:
    """Batched 3D smoothing. Gaussians with ν̂ unset pass through unfiltered."""
    var = np.exp(2.0 * log_scales)
    ok = np.isfinite(rates) & (rates > 0)
    added = np.zeros(var.shape[0])
    added[ok] = s / rates[ok] ** 2
    new_var = var + added[:, None]
    scale = np.sqrt(np.prod(var / new_var, axis=1))
    return SmoothedAttributes(variances=new_var, opacity_scale=scale, added=added)


@dataclass
class FilteredBatch:
    cov: np.ndarray          # (M, 2, 2) Σ_filter
    opacity: np.ndarray      # (M,) o_filter
    kernel: np.ndarray       # (M,) isotropic kernel s_eff
    det_ratio: np.ndarray    # (M,) √(|Σ_proj|/|Σ_filter|), 1 when opacity is not rescaled
    kernel_depth_slope: np.ndarray  # (M,) ∂s_eff/∂μ_z, 0 where the kernel is clamped or constant


def filter_batch(
    cov2d: np.ndarray,
    opacity: np.ndarray,
    depths: np.ndarray,
    mode: FilterMode,
    focal: float,
    ref_ratios: Optional[np.ndarray] = None,
    exact_kernels: Optional[np.ndarray] = None,
    exact_mask: Optional[np.ndarray] = None,
) -> FilteredBatch:
    """
    Apply `mode` to M projected splats at once.

    Args:
        cov2d: (M, 2, 2) projected covariances.
        opacity: (M,) opacities entering the filter.
        depths: (M,) camera-space depths.
        mode: Filter mode.
        focal: f_x of the rendering view.
        ref_ratios: (M,) ν̂ per splat, NaN where unset.
        exact_kernels: (M, 2, 2) full kernels from the exact path, overriding s_eff.
        exact_mask: (M,) rows where exact_kernels applies; all rows when omitted.
    """
    m = cov2d.shape[0]
    kernel = np.zeros(m)
    slope = np.zeros(m)
    if mode.kind in (FilterKind.EWA, FilterKind.MIP):
        kernel[:] = mode.s
    elif mode.kind is FilterKind.VIEW_CONSISTENT:
        ratio = focal / depths
        clamped = np.zeros(m, dtype=bool)
        if ref_ratios is not None:
            clamped = np.isfinite(ref_ratios) & (ratio < ref_ratios)
            ratio = np.where(clamped, ref_ratios, ratio)
        kernel = mode.s0 * ratio * ratio
        slope = np.where(clamped, 0.0, -2.0 * kernel / depths)

    filtered = cov2d.copy()
    filtered[:, 0, 0] += kernel
    filtered[:, 1, 1] += kernel
    if exact_kernels is not None:
        has = exact_mask if exact_mask is not None else np.ones(m, dtype=bool)
        filtered[has] = cov2d[has] + exact_kernels[has]
        kernel = np.where(has, 0.5 * (exact_kernels[:, 0, 0] + exact_kernels[:, 1, 1]), kernel)
        slope = np.where(has, 0.0, slope)

    if mode.rescales_opacity:
        det_p = np.clip(cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0], 0.0, None)
        det_f = filtered[:, 0, 0] * filtered[:, 1, 1] - filtered[:, 0, 1] * filtered[:, 1, 0]
        ratio = np.sqrt(np.divide(det_p, det_f, out=np.zeros(m), where=det_f > 0))
    else:
        ratio = np.ones(m)
    return FilteredBatch(
        cov=filtered, opacity=opacity * ratio, kernel=kernel, det_ratio=ratio, kernel_depth_slope=slope
    )


def exact_kernels_batch(
    indices: np.ndarray,
    world_jacobians: np.ndarray,
    positions: np.ndarray,
    sampling_view: np.ndarray,
    rates: np.ndarray,
    training_views: Sequence[CameraView],
    s0: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-splat exact kernels sI + blur_kernel for splats with a recorded training view.

    The Jacobians compared are world → screen (J·W) for both views, so the
    kernel is transported between cameras with different orientations. The
    training kernel s is s₀·ν̂². Returns (kernels, has_exact mask).
    """
    m = indices.shape[0]
    kernels = np.zeros((m, 2, 2))
    has = np.zeros(m, dtype=bool)
    for row, gi in enumerate(indices):
        vi = int(sampling_view[gi])
        if vi < 0 or vi >= len(training_views) or not np.isfinite(rates[gi]):
            continue
        tv = training_views[vi]
        mean_cam = tv.rotation @ positions[gi] + tv.translation
        x, y, z = mean_cam
        if z <= NEAR:
            continue
        j_train = np.array([[tv.fx / z, 0.0, -tv.fx * x / (z * z)], [0.0, tv.fy / z, -tv.fy * y / (z * z)]])
        s = s0 * rates[gi] ** 2
        extra = blur_kernel(world_jacobians[row], right_pseudo_inverse(j_train @ tv.rotation), s)
        if np.linalg.eigvalsh(extra)[0] < 0.0:
            extra = np.zeros((2, 2))
        kernels[row] = s * np.eye(2) + extra
        has[row] = True
    return kernels, has
