"""
Zoom benchmark: how the anisotropy of filtered splats evolves as the focal
length grows.

For every filter mode and focal multiplier m the scene is projected with the
zoomed camera and filtered; κ quartiles and mean H of Σ_filter are reported
over every splat in front of the camera (the image rectangle is ignored so
all multipliers summarize the same splat set). One splat closest to the
optical axis is tracked against the closed-form curve

    κ(x) = (2s + (a + r·d + p)·x) / (2s + (a + r·d − p)·x),
    x = f_x²/μ_z²,  r = f_y²/f_x²,  p = √((a − r·d)² + 4·r·b²)

where a, b, d are the camera-space covariance entries of its x/y block.
Constant kernels make κ grow with x; the view-consistent kernel s = s₀·x
cancels it.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from spectral_splat.bench.analyze import spectral_statistics, write_rows_csv
from spectral_splat.core.filters import FilterKind, FilterMode, filter_batch
from spectral_splat.core.scene import CameraView, GaussianScene, project_batch
from spectral_splat.core.spectral import eigvals_sym2
from spectral_splat.optim.losses import psnr
from spectral_splat.render.plot import PALETTE, Series, plot_series
from spectral_splat.render.rasterizer import render
from spectral_splat.storage.images import save_png, write_json
from spectral_splat.utils.config import RenderConfig
from spectral_splat.utils.errors import EmptySceneError, NumericalError
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_MULTIPLIERS = (1.0, 2.0, 4.0, 8.0)
ANALYTIC_RTOL = 1e-6
CONSTANCY_RTOL = 1e-9
ON_AXIS_TOL = 1e-9
CURVE_SAMPLES = 64

CSV_COLUMNS = (
    "mode", "multiplier", "x", "count", "entropy_mean", "kappa_q1", "kappa_median", "kappa_q3",
    "axis_kappa", "axis_kappa_analytic", "psnr",
)


@dataclass
class ZoomPoint:
    mode: str
    multiplier: float
    x: float
    count: int
    entropy_mean: float
    kappa_q1: float
    kappa_median: float
    kappa_q3: float
    axis_kappa: float
    axis_kappa_analytic: Optional[float] = None
    psnr: Optional[float] = None


@dataclass
class ZoomCheck:
    mode: str
    name: str
    passed: bool
    detail: str


@dataclass
class AxisSplat:
    index: int
    a: float
    b: float
    d: float
    depth: float
    on_axis: bool


@dataclass
class ZoomReport:
    multipliers: List[float]
    modes: List[str]
    axis: AxisSplat
    r: float = 1.0
    ref_rate: Optional[float] = None
    filter_modes: List[FilterMode] = field(default_factory=list, repr=False)
    points: List[ZoomPoint] = field(default_factory=list)
    checks: List[ZoomCheck] = field(default_factory=list)

    def for_mode(self, mode: str) -> List[ZoomPoint]:
        return [p for p in self.points if p.mode == mode]

    def kappa_ratio(self, mode: str) -> float:
        """Median κ at the largest multiplier over the smallest."""
        pts = self.for_mode(mode)
        return pts[-1].kappa_median / pts[0].kappa_median

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "multipliers": self.multipliers,
            "modes": self.modes,
            "axis": asdict(self.axis),
            "aspect_r": self.r,
            "points": [asdict(p) for p in self.points],
            "checks": [asdict(c) for c in self.checks],
            "kappa_ratio": {m: self.kappa_ratio(m) for m in self.modes},
        }


# ─── Closed form ────────────────────────────────────────────────────────────

def analytic_kappa(a: float, b: float, d: float, x, r: float, s) -> np.ndarray:
    """κ of x·[[a, √r·b], [√r·b, r·d]] + s·I."""
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    p = math.sqrt((a - r * d) ** 2 + 4.0 * r * b * b)
    return (2.0 * s + (a + r * d + p) * x) / (2.0 * s + (a + r * d - p) * x)


def _kernel_for(mode: FilterMode, x, ref_ratio: Optional[float]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if mode.kind in (FilterKind.EWA, FilterKind.MIP):
        return np.full_like(x, mode.s)
    if mode.kind is FilterKind.VIEW_CONSISTENT:
        ratio2 = x if ref_ratio is None else np.maximum(x, ref_ratio ** 2)
        return mode.s0 * ratio2
    return np.zeros_like(x)


# ─── Measurement ────────────────────────────────────────────────────────────

def _project_all(scene: GaussianScene, view: CameraView, cfg: RenderConfig):
    return project_batch(scene.positions, scene.covariances(), view, near=cfg.near, margin=math.inf)


def pick_axis_splat(scene: GaussianScene, view: CameraView, cfg: Optional[RenderConfig] = None) -> AxisSplat:
    """The splat whose mean lies closest to the optical axis (by angle)."""
    cfg = cfg or RenderConfig()
    proj = _project_all(scene, view, cfg)
    if len(proj) == 0:
        raise EmptySceneError("No Gaussian lies in front of the base view")
    mc = proj.mean_cam
    offaxis = np.hypot(mc[:, 0], mc[:, 1]) / mc[:, 2]
    row = int(np.argmin(offaxis))
    cov = proj.cov_cam[row]
    return AxisSplat(
        index=int(proj.indices[row]),
        a=float(cov[0, 0]),
        b=float(cov[0, 1]),
        d=float(cov[1, 1]),
        depth=float(mc[row, 2]),
        on_axis=bool(offaxis[row] <= ON_AXIS_TOL),
    )


def filtered_eigenvalues(
    scene: GaussianScene, view: CameraView, mode: FilterMode, cfg: Optional[RenderConfig] = None
):
    """(indices, descending eigenvalues (M, 2)) of Σ_filter for every splat in front of `view`."""
    cfg = cfg or RenderConfig()
    proj = _project_all(scene, view, cfg)
    filtered = filter_batch(
        proj.cov2d,
        scene.opacities()[proj.indices],
        proj.depths,
        mode,
        view.fx,
        ref_ratios=scene.max_sampling_rate[proj.indices],
    )
    cov = filtered.cov
    hi, lo = eigvals_sym2(cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1])
    return proj.indices, np.stack([hi, lo], axis=-1)


# ─── Bench ──────────────────────────────────────────────────────────────────

def zoom_bench(
    scene: GaussianScene,
    view: CameraView,
    modes: Sequence[FilterMode],
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS,
    cfg: Optional[RenderConfig] = None,
    reference_scene: Optional[GaussianScene] = None,
    reference_mode: Optional[FilterMode] = None,
    strict: bool = True,
) -> ZoomReport:
    """
    Measure filtered anisotropy over focal multipliers for each mode.

    Args:
        scene: Gaussians to analyse.
        view: Base camera (multiplier 1).
        modes: Filter modes to compare.
        multipliers: Ascending focal multipliers.
        cfg: Render settings (near plane; rasterizer settings when PSNR is computed).
        reference_scene: Ground truth rendered at every zoom for PSNR; skipped when None.
        reference_mode: Filter used for the ground-truth render (EWA by default).
        strict: Raise NumericalError when a monotonicity/constancy check fails.

    Raises:
        EmptySceneError: nothing in front of the base view.
        NumericalError: a check failed and strict is set.
    """
    cfg = cfg or RenderConfig()
    mults = [float(m) for m in multipliers]
    if not mults or any(b <= a for a, b in zip(mults, mults[1:])) or mults[0] <= 0:
        raise NumericalError(f"Multipliers must be positive and strictly ascending, got {mults}")

    axis = pick_axis_splat(scene, view, cfg)
    ref_rate = scene.max_sampling_rate[axis.index]
    ref_rate = None if np.isnan(ref_rate) else float(ref_rate)
    r = (view.fy / view.fx) ** 2
    report = ZoomReport(
        multipliers=mults, modes=[m.describe() for m in modes], axis=axis, r=r, ref_rate=ref_rate,
        filter_modes=list(modes),
    )

    for mode in modes:
        name = mode.describe()
        for mult in mults:
            cam = view.zoomed(mult)
            indices, eig = filtered_eigenvalues(scene, cam, mode, cfg)
            stats = spectral_statistics(eig)
            row = int(np.nonzero(indices == axis.index)[0][0])
            x = (cam.fx / axis.depth) ** 2
            analytic = None
            if axis.on_axis:
                s = _kernel_for(mode, x, ref_rate)
                analytic = float(analytic_kappa(axis.a, axis.b, axis.d, x, r, s))
            quality = None
            if reference_scene is not None:
                ref_img = render(reference_scene, cam, reference_mode or FilterMode.ewa(), cfg).framebuffer
                quality = psnr(render(scene, cam, mode, cfg).framebuffer, ref_img)
            report.points.append(
                ZoomPoint(
                    mode=name,
                    multiplier=mult,
                    x=x,
                    count=stats.count,
                    entropy_mean=stats.entropy_mean,
                    kappa_q1=stats.kappa_q1,
                    kappa_median=stats.kappa_median,
                    kappa_q3=stats.kappa_q3,
                    axis_kappa=float(eig[row, 0] / eig[row, 1]),
                    axis_kappa_analytic=analytic,
                    psnr=quality,
                )
            )
        report.checks.extend(_checks(mode, report.for_mode(name), axis))

    for c in report.checks:
        log = logger.info if c.passed else logger.error
        log(f"zoom check [{c.mode}] {c.name}: {'ok' if c.passed else 'FAILED'} ({c.detail})")
    if strict and not report.passed:
        failed = ", ".join(f"{c.mode}:{c.name}" for c in report.checks if not c.passed)
        raise NumericalError(f"Zoom checks failed: {failed}")
    return report


def _checks(mode: FilterMode, points: List[ZoomPoint], axis: AxisSplat) -> List[ZoomCheck]:
    name = mode.describe()
    checks = []
    kappas = np.array([p.axis_kappa for p in points])

    if axis.on_axis:
        ana = np.array([p.axis_kappa_analytic for p in points])
        err = float(np.max(np.abs(kappas - ana) / ana))
        checks.append(ZoomCheck(name, "analytic-curve", err <= ANALYTIC_RTOL, f"max rel err {err:.3e}"))

    if mode.kind in (FilterKind.EWA, FilterKind.MIP):
        anisotropic = abs(axis.a - axis.d) > 0 or axis.b != 0
        if anisotropic and kappas.size > 1:
            increasing = bool(np.all(np.diff(kappas) > 0))
            checks.append(ZoomCheck(name, "monotone-increasing", increasing, f"axis κ {kappas.round(6).tolist()}"))
    elif mode.kind is FilterKind.VIEW_CONSISTENT:
        quart = np.array([[p.kappa_q1, p.kappa_median, p.kappa_q3, p.axis_kappa] for p in points])
        dev = float(np.max(np.abs(quart - quart[0]) / quart[0]))
        checks.append(ZoomCheck(name, "zoom-invariant", dev <= CONSTANCY_RTOL, f"max rel deviation {dev:.3e}"))
    return checks


# ─── Outputs ────────────────────────────────────────────────────────────────

def zoom_curve_image(report: ZoomReport, width: int = 480, height: int = 320) -> np.ndarray:
    """Axis-splat κ against f²/μ_z²: analytic lines (when on axis) with measured markers."""
    xs = sorted({p.x for p in report.points})
    dense = np.geomspace(xs[0], xs[-1], CURVE_SAMPLES) if len(xs) > 1 else np.array(xs)
    axis = report.axis
    series = []
    for i, (name, mode) in enumerate(zip(report.modes, report.filter_modes)):
        color = PALETTE[i % len(PALETTE)]
        pts = report.for_mode(name)
        if axis.on_axis and dense.size > 1:
            s = _kernel_for(mode, dense, report.ref_rate)
            series.append(Series(xs=dense, ys=analytic_kappa(axis.a, axis.b, axis.d, dense, report.r, s), color=color))
        series.append(
            Series(xs=[p.x for p in pts], ys=[p.axis_kappa for p in pts], color=color, label=name,
                   lines=not axis.on_axis, markers=True)
        )
    return plot_series(
        series, width=width, height=height, log_x=True, log_y=True,
        title=f"tracked splat #{axis.index}", xlabel="f² / μ_z²", ylabel="κ(Σ_filter)",
    )


def write_zoom_outputs(report: ZoomReport, out_prefix: str) -> Dict[str, str]:
    """Write `<prefix>.csv`, `<prefix>.json` and `<prefix>_curve.png`."""
    paths = {
        "csv": write_rows_csv(f"{out_prefix}.csv", [asdict(p) for p in report.points], CSV_COLUMNS),
        "png": save_png(f"{out_prefix}_curve.png", zoom_curve_image(report)),
    }
    write_json(f"{out_prefix}.json", report.as_dict())
    paths["json"] = f"{out_prefix}.json"
    logger.info(f"Wrote zoom report to {out_prefix}.{{csv,json}} and {paths['png']}")
    return paths
