"""
Photometric loss, image metrics and the entropy-based shape regularizer.

The photometric loss L = (1−λ)·L1 + λ·D-SSIM is evaluated with torch so its
gradient image comes from autograd; everything runs in float64 on the CPU.
"""

import math
from functools import lru_cache
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from spectral_splat.core.scene import GaussianScene
from spectral_splat.core.spectral import LN3, entropy_from_eigenvalues
from spectral_splat.render.rasterizer import Framebuffer
from spectral_splat.utils.errors import EmptySceneError, ShapeMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0
PSNR_MSE_FLOOR = 1e-10

Image = Union[np.ndarray, Framebuffer]


def _as_array(img: Image) -> np.ndarray:
    arr = img.rgb if isinstance(img, Framebuffer) else np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def _pair(a: Image, b: Image) -> Tuple[np.ndarray, np.ndarray]:
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"Image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def _to_tensor(img: np.ndarray, requires_grad: bool = False) -> torch.Tensor:
    # (H, W, C) → (1, C, H, W)
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None].to(torch.float64)
    return t.requires_grad_(requires_grad)


@lru_cache(maxsize=8)
def _window(channels: int) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=torch.float64) - SSIM_WINDOW // 2
    g = torch.exp(-(coords ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    w2d = torch.outer(g, g)
    return w2d.expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()


def ssim_tensor(img1: torch.Tensor, img2: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of two (1, C, H, W) tensors with a Gaussian window."""
    channels = img1.shape[1]
    window = _window(channels)
    pad = SSIM_WINDOW // 2

    mu1 = F.conv2d(img1, window, padding=pad, groups=channels)
    mu2 = F.conv2d(img2, window, padding=pad, groups=channels)
    mu1_sq, mu2_sq, mu1_mu2 = mu1.pow(2), mu2.pow(2), mu1 * mu2

    sigma1_sq = F.conv2d(img1 * img1, window, padding=pad, groups=channels) - mu1_sq
    sigma2_sq = F.conv2d(img2 * img2, window, padding=pad, groups=channels) - mu2_sq
    sigma12 = F.conv2d(img1 * img2, window, padding=pad, groups=channels) - mu1_mu2

    ssim_map = ((2 * mu1_mu2 + SSIM_C1) * (2 * sigma12 + SSIM_C2)) / (
        (mu1_sq + mu2_sq + SSIM_C1) * (sigma1_sq + sigma2_sq + SSIM_C2)
    )
    return ssim_map.mean()


def ssim(a: Image, b: Image) -> float:
    x, y = _pair(a, b)
    with torch.no_grad():
        return float(ssim_tensor(_to_tensor(x), _to_tensor(y)))


def dssim(a: Image, b: Image) -> float:
    """(1 − SSIM) / 2."""
    return (1.0 - ssim(a, b)) / 2.0


def loss(rendered: Image, target: Image, lambda_dssim: float = 0.2) -> Tuple[float, np.ndarray]:
    """
    Photometric training loss and its gradient w.r.t. the rendered image.

    Returns:
        (L, dL/d rendered) with the gradient shaped like the rendered image (H, W, C).
    """
    x, y = _pair(rendered, target)
    img = _to_tensor(x, requires_grad=True)
    ref = _to_tensor(y)
    l1 = torch.abs(img - ref).mean()
    value = (1.0 - lambda_dssim) * l1
    if lambda_dssim > 0:
        value = value + lambda_dssim * (1.0 - ssim_tensor(img, ref)) / 2.0
    value.backward()
    grad = img.grad[0].numpy().transpose(1, 2, 0).copy()
    return float(value.detach()), grad


def psnr(a: Image, b: Image) -> float:
    """10·log10(1/MSE) on [0, 1] images, capped at 100 dB."""
    x, y = _pair(a, b)
    mse = float(np.mean((x - y) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# ─── Shape statistics ───────────────────────────────────────────────────────

def scene_entropies(scene: GaussianScene) -> np.ndarray:
    # eigenvalues of R·diag(v)·Rᵀ are the per-axis variances
    return entropy_from_eigenvalues(scene.variances())


def scene_entropy_metric(scene: GaussianScene) -> float:
    """Unweighted mean spectral entropy over Gaussians."""
    if len(scene) == 0:
        raise EmptySceneError("Scene has no Gaussians")
    return float(np.mean(scene_entropies(scene)))


def shape_regularizer(scene: GaussianScene) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    L_Σ = mean(ln 3 − H(Σ)) with analytic gradients.

    H depends only on the variances, so the quaternion gradient is exactly zero
    and nothing reaches the positions or the screen-space means.

    Returns:
        (L_Σ, dL/d log_scales (N, 3), dL/d rotations (N, 4)).
    """
    n = len(scene)
    if n == 0:
        return 0.0, np.zeros((0, 3)), np.zeros((0, 4))
    var = scene.variances()
    t = var / np.sum(var, axis=1, keepdims=True)
    logt = np.log(t, out=np.zeros_like(t), where=t > 0)
    entropy = -np.sum(t * logt, axis=1)
    value = float(np.mean(LN3 - entropy))
    # dH/dl_k = 2·t_k·(−ln t_k − H)
    d_entropy = 2.0 * t * (-logt - entropy[:, None])
    return value, -d_entropy / n, np.zeros((n, 4))
