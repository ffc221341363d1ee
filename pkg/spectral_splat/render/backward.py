"""
Analytic backward pass for the tile rasterizer.

Chains per-pixel image gradients through the blend, the screen-space filter,
the perspective projection and covariance composition to the stored scene
parameters (positions, quaternions, log-scales, opacity logits, f_dc).

Matrix gradients use the full-matrix convention: for a symmetric argument
every entry is treated as independent, so G[0,1] and G[1,0] both carry the
off-diagonal sensitivity.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List

import numpy as np

from spectral_splat.core.scene import SH_C0, GaussianScene, quaternion_to_rotation
from spectral_splat.render.rasterizer import RasterTape, RenderResult, TileRecord
from spectral_splat.utils.errors import ShapeMismatchError
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class RasterGrads:
    """Gradients w.r.t. the rasterizer inputs (one row per splat in the batch)."""

    means: np.ndarray      # (M, 2)
    covs: np.ndarray       # (M, 2, 2) w.r.t. Σ_filter
    opacities: np.ndarray  # (M,) w.r.t. o_filter
    features: np.ndarray   # (M, C)


@dataclass
class SceneGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    f_dc: np.ndarray
    mean2d: np.ndarray  # (N, 2) screen-space gradients, pixels
    visible: np.ndarray  # (N,) bool

    @classmethod
    def zeros(cls, n: int) -> "SceneGradients":
        return cls(
            positions=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            f_dc=np.zeros((n, 3)),
            mean2d=np.zeros((n, 2)),
            visible=np.zeros(n, dtype=bool),
        )


# ─── Blend ──────────────────────────────────────────────────────────────────

def _tile_backward(record: TileRecord, tape: RasterTape, grad_image: np.ndarray):
    y0, y1, x0, x1 = record.bounds
    ks = record.splats
    batch, cfg = tape.batch, tape.cfg
    channels = batch.features.shape[1]
    if ks.size == 0:
        return ks, np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, channels))

    g = grad_image[y0:y1, x0:x1]
    alpha, t_before, gauss = record.alpha, record.t_before, record.gauss
    cg = np.tensordot(batch.features[ks], g, axes=([1], [2]))  # (K, h, w)
    visible = alpha * t_before
    contrib = visible * cg

    # Σ_{j>k} (c_j·g) α_j T_j + (bg·g) T_final
    later = np.cumsum(contrib[::-1], axis=0)[::-1]
    behind = np.zeros_like(later)
    behind[:-1] = later[1:]
    behind += (g @ tape.background) * tape.final_transmittance[y0:y1, x0:x1]
    d_alpha = t_before * cg - behind / (1.0 - alpha)

    raw = batch.opacities[ks][:, None, None] * gauss
    w = np.where((alpha > 0.0) & (raw < cfg.alpha_max), d_alpha, 0.0)
    wa = w * raw
    g_o = np.sum(w * gauss, axis=(1, 2))

    dx = np.arange(x0, x1, dtype=np.float64)[None, :] - batch.means[ks, 0][:, None]  # (K, w)
    dy = np.arange(y0, y1, dtype=np.float64)[None, :] - batch.means[ks, 1][:, None]  # (K, h)
    cols, rows = wa.sum(axis=1), wa.sum(axis=2)
    sx, sxx = np.sum(cols * dx, axis=1), np.sum(cols * dx * dx, axis=1)
    sy, syy = np.sum(rows * dy, axis=1), np.sum(rows * dy * dy, axis=1)
    sxy = np.einsum("khw,kh,kw->k", wa, dy, dx)

    q00, q01, q11 = tape.conics[ks].T
    g_mean = np.stack([q00 * sx + q01 * sy, q01 * sx + q11 * sy], axis=-1)
    g_q = -0.5 * np.stack([sxx, sxy, syy], axis=-1)
    g_feat = np.tensordot(visible, g, axes=([1, 2], [0, 1]))
    return ks, g_mean, g_q, g_o, g_feat


def rasterize_backward(tape: RasterTape, grad_image: np.ndarray) -> RasterGrads:
    """
    Gradients of a scalar loss w.r.t. splat means, Σ_filter, o_filter and features.

    Args:
        tape: Recorded forward pass.
        grad_image: (H, W, C) dL/d(output image).
    """
    h, w = tape.final_transmittance.shape
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (h, w, tape.background.shape[0]):
        raise ShapeMismatchError(f"Gradient image shape {grad_image.shape} does not match render {(h, w)}")

    batch = tape.batch
    m = len(batch)
    g_means = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_features = np.zeros((m, batch.features.shape[1]))

    threads = tape.cfg.threads
    if threads > 1 and len(tape.tiles) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: _tile_backward(r, tape, grad_image), tape.tiles))
    else:
        results = [_tile_backward(r, tape, grad_image) for r in tape.tiles]

    # merge in tile order; rows are unique within a tile
    for ks, g_mean, g_q, g_o, g_feat in results:
        g_means[ks] += g_mean
        g_conic[ks] += g_q
        g_opacity[ks] += g_o
        g_features[ks] += g_feat

    # Σ_filter = Q⁻¹ → dL/dΣ = −Q·G_Q·Q
    q = np.zeros((m, 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = tape.conics.T[0], tape.conics.T[1], tape.conics.T[1], tape.conics.T[2]
    gq = np.zeros((m, 2, 2))
    gq[:, 0, 0], gq[:, 0, 1], gq[:, 1, 0], gq[:, 1, 1] = g_conic[:, 0], g_conic[:, 1], g_conic[:, 1], g_conic[:, 2]
    g_covs = -np.einsum("nij,njk,nkl->nil", q, gq, q)
    return RasterGrads(means=g_means, covs=g_covs, opacities=g_opacity, features=g_features)


# ─── Parameter chain ────────────────────────────────────────────────────────

def _adjugate2(m: np.ndarray) -> np.ndarray:
    adj = np.empty_like(m)
    adj[:, 0, 0] = m[:, 1, 1]
    adj[:, 1, 1] = m[:, 0, 0]
    adj[:, 0, 1] = -m[:, 1, 0]
    adj[:, 1, 0] = -m[:, 0, 1]
    return adj


def _rotation_grad_to_quaternion(q_raw: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    qn = q_raw / norm
    w, x, y, z = qn.T
    zero = np.zeros_like(w)

    def mat(*rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    d_w = mat((zero, -2 * z, 2 * y), (2 * z, zero, -2 * x), (-2 * y, 2 * x, zero))
    d_x = mat((zero, 2 * y, 2 * z), (2 * y, -4 * x, -2 * w), (2 * z, 2 * w, -4 * x))
    d_y = mat((-4 * y, 2 * x, 2 * w), (2 * x, zero, 2 * z), (-2 * w, 2 * z, -4 * y))
    d_z = mat((-4 * z, -2 * w, 2 * x), (2 * w, -4 * z, 2 * y), (2 * x, 2 * y, zero))
    g_qn = np.stack([np.sum(g_rot * d, axis=(1, 2)) for d in (d_w, d_x, d_y, d_z)], axis=-1)

    # through q̂ = q/|q|
    radial = np.sum(g_qn * qn, axis=1, keepdims=True)
    return (g_qn - qn * radial) / norm


def backward(result: RenderResult, grad_image: np.ndarray, scene: GaussianScene) -> SceneGradients:
    """
    Full backward pass from image gradients to scene parameters.

    Args:
        result: Render recorded with `record=True`.
        grad_image: (H, W, 3) dL/d(rendered RGB).
        scene: The scene that was rendered (unchanged since).

    Returns:
        SceneGradients with zero rows for Gaussians that were culled. The exact
        view-consistent kernel is treated as a constant.
    """
    if result.tape is None:
        raise ValueError("backward needs a render recorded with record=True")
    ctx = result.context
    proj, filt, view = ctx.projection, ctx.filtered, ctx.view
    idx = proj.indices
    grads = SceneGradients.zeros(len(scene))
    if len(idx) == 0:
        return grads

    rg = rasterize_backward(result.tape, grad_image)

    # colors: rgb = clamp(0.5 + C0·f_dc)
    unclamped = (ctx.raw_color > 0.0) & (ctx.raw_color < 1.0)
    g_fdc = rg.features * SH_C0 * unclamped

    # o_filter = o_in · ratio, ratio = √(|Σ_p| / |F|)
    o_in = ctx.base_opacity * ctx.smooth_scale
    g_oin = rg.opacities * filt.det_ratio
    g_F = rg.covs.copy()
    cov_p = proj.cov2d
    g_Sp = np.zeros_like(g_F)
    if ctx.mode.rescales_opacity:
        g_ratio = rg.opacities * o_in
        ratio = filt.det_ratio
        det_p = cov_p[:, 0, 0] * cov_p[:, 1, 1] - cov_p[:, 0, 1] * cov_p[:, 1, 0]
        fc = filt.cov
        det_f = fc[:, 0, 0] * fc[:, 1, 1] - fc[:, 0, 1] * fc[:, 1, 0]
        ok = (det_p > 0.0) & (det_f > 0.0)
        coef_f = np.where(ok, -0.5 * g_ratio * ratio / np.where(ok, det_f, 1.0), 0.0)
        coef_p = np.where(ok, 0.5 * g_ratio * ratio / np.where(ok, det_p, 1.0), 0.0)
        g_F += coef_f[:, None, None] * _adjugate2(fc)
        g_Sp += coef_p[:, None, None] * _adjugate2(cov_p)
    g_Sp += g_F
    g_kernel = g_F[:, 0, 0] + g_F[:, 1, 1]

    # Σ_p = J Σ' Jᵀ, Σ' = W Σ Wᵀ
    jac = proj.jacobian
    cov_cam = proj.cov_cam
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", g_Sp, jac, cov_cam)
    g_cov_cam = np.einsum("nji,njk,nkl->nil", jac, g_Sp, jac)
    rot_w = view.rotation
    g_cov = np.einsum("ji,njk,kl->nil", rot_w, g_cov_cam, rot_w)

    # μ_proj and J depend on μ'
    fx, fy = view.fx, view.fy
    x, y, z = proj.mean_cam.T
    gm = rg.means
    g_mc = np.zeros((len(idx), 3))
    g_mc[:, 0] = gm[:, 0] * fx / z - g_J[:, 0, 2] * fx / (z * z)
    g_mc[:, 1] = gm[:, 1] * fy / z - g_J[:, 1, 2] * fy / (z * z)
    g_mc[:, 2] = (
        -gm[:, 0] * fx * x / (z * z)
        - gm[:, 1] * fy * y / (z * z)
        - g_J[:, 0, 0] * fx / (z * z)
        + g_J[:, 0, 2] * 2.0 * fx * x / (z ** 3)
        - g_J[:, 1, 1] * fy / (z * z)
        + g_J[:, 1, 2] * 2.0 * fy * y / (z ** 3)
        + g_kernel * filt.kernel_depth_slope
    )
    grads.positions[idx] = g_mc @ rot_w

    # Σ = R diag(a) Rᵀ, a = exp(2l) + v
    q_raw = scene.rotations[idx]
    rot = quaternion_to_rotation(q_raw)
    var = ctx.variances[idx]
    g_rot = 2.0 * np.einsum("nij,njk,nk->nik", g_cov, rot, var)
    g_var = np.einsum("nji,njk,nki->ni", rot, g_cov, rot)
    base_var = np.exp(2.0 * scene.log_scales[idx])
    g_log = g_var * 2.0 * base_var

    sigma = ctx.base_opacity
    g_sigma = g_oin * ctx.smooth_scale
    if ctx.smoothing is not None:
        added = ctx.smoothing.added[idx]
        g_scale = g_oin * sigma
        g_log += (g_scale * ctx.smooth_scale)[:, None] * added[:, None] / var

    grads.rotations[idx] = _rotation_grad_to_quaternion(q_raw, g_rot)
    grads.log_scales[idx] = g_log
    grads.opacity_logits[idx] = g_sigma * sigma * (1.0 - sigma)
    grads.f_dc[idx] = g_fdc
    grads.mean2d[idx] = gm
    grads.visible[idx] = True
    return grads
