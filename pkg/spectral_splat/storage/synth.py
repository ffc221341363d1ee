"""
Seeded synthetic scenes and their camera rigs.

All scenes live on or around a ball of radius 40 at the origin; cameras sit
160 units away looking at the origin with focal length 1.5625·width, so a
splat at the centre is magnified about 2.5× (f/z is O(1) and pixel-unit
filter kernels stay meaningful).
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from spectral_splat.core.filters import FilterMode
from spectral_splat.core.scene import (
    CameraView,
    GaussianScene,
    inverse_sigmoid,
    rgb_to_fdc,
    rotation_to_quaternion,
)
from spectral_splat.render.rasterizer import render
from spectral_splat.utils.cache import cached_images, content_hash
from spectral_splat.utils.config import RenderConfig
from spectral_splat.utils.errors import DomainError
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

BALL_RADIUS = 40.0
CAMERA_DISTANCE = 160.0
FOCAL_PER_WIDTH = 1.5625
TRAIN_VIEWS = 8
TRAIN_ELEVATION_DEG = 20.0
TEST_CAMERAS = ((22.5, 35.0), (157.5, -10.0), (292.5, 5.0))  # (azimuth, elevation) in degrees
NEEDLE_KAPPA_RANGE = (100.0, 1e4)
NEEDLE_MID_RANGE = (1.0, 2.0)
DISC_FLATNESS = 0.2
SYNTH_OPACITY = 0.9

KINDS = ("needles", "isotropic", "textured-ball-analog")
TEXTURES = ("monochrome", "multicolor", "high-frequency")


@dataclass
class SynthScene:
    kind: str
    seed: int
    scene: GaussianScene
    train_views: List[CameraView]
    test_views: List[CameraView]


# ─── Cameras ────────────────────────────────────────────────────────────────

def orbit_camera(azimuth_deg: float, elevation_deg: float, width: int, height: int, camera_id: str) -> CameraView:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = CAMERA_DISTANCE * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return CameraView.look_at(
        eye, (0.0, 0.0, 0.0), focal=FOCAL_PER_WIDTH * width, width=width, height=height, camera_id=camera_id
    )


def camera_ring(width: int = 256, height: int = 256) -> Tuple[List[CameraView], List[CameraView]]:
    """8 training views on a ring plus 3 held-out views between them."""
    train = [
        orbit_camera(360.0 * i / TRAIN_VIEWS, TRAIN_ELEVATION_DEG, width, height, f"train_{i:02d}")
        for i in range(TRAIN_VIEWS)
    ]
    test = [orbit_camera(az, el, width, height, f"test_{i:02d}") for i, (az, el) in enumerate(TEST_CAMERAS)]
    return train, test


# ─── Geometry helpers ───────────────────────────────────────────────────────

def _sphere_points(n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _random_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def _tangent_frames(normals: np.ndarray) -> np.ndarray:
    """Unit quaternions whose third axis is the given normal."""
    quats = np.empty((normals.shape[0], 4))
    for i, n in enumerate(normals):
        helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(helper, n)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(n, e1)
        quats[i] = rotation_to_quaternion(np.stack([e1, e2, n], axis=1))
    return quats


def _surface_sigma(n: int) -> float:
    return 0.5 * math.sqrt(4.0 * math.pi * BALL_RADIUS ** 2 / n)


# ─── Textures ───────────────────────────────────────────────────────────────

def _texture_colors(normals: np.ndarray, texture: str, rng: np.random.Generator) -> np.ndarray:
    n = normals.shape[0]
    if texture == "monochrome":
        return np.tile([0.75, 0.45, 0.25], (n, 1))
    if texture == "multicolor":
        return np.clip(0.5 + 0.4 * normals[:, [0, 1, 2]] * np.array([1.0, -1.0, 1.0]), 0.0, 1.0)
    if texture == "high-frequency":
        freq = rng.integers(10, 18, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi, size=2)
        palette = rng.uniform(0.05, 0.95, size=(2, 3))
        theta = np.arccos(np.clip(normals[:, 2], -1.0, 1.0))
        phi = np.arctan2(normals[:, 1], normals[:, 0])
        cell = (np.sin(freq[0] * theta + phase[0]) * np.sin(freq[1] * phi + phase[1])) > 0
        colors = palette[cell.astype(int)]
        return np.clip(colors + rng.uniform(-0.08, 0.08, size=(n, 3)), 0.0, 1.0)
    raise DomainError(f"Unknown texture '{texture}'. Expected one of: {', '.join(TEXTURES)}")


# ─── Scenes ─────────────────────────────────────────────────────────────────

def synth_scene(
    kind: str,
    n: int,
    seed: int = 0,
    width: int = 256,
    height: int = 256,
    texture: str = "high-frequency",
) -> SynthScene:
    """
    Generate a deterministic synthetic scene with its camera ring.

    Args:
        kind: "isotropic" (round splats on the sphere), "needles" (random
              orientations, κ log-uniform in [100, 10⁴]) or
              "textured-ball-analog" (tangent discs colored by `texture`).
        n: Number of Gaussians (≥ 1).
        seed: RNG seed; equal seeds give identical scenes.
        texture: "monochrome", "multicolor" or "high-frequency".
    """
    if kind not in KINDS:
        raise DomainError(f"Unknown synthetic scene '{kind}'. Expected one of: {', '.join(KINDS)}")
    if n < 1:
        raise DomainError(f"Synthetic scenes need n >= 1, got {n}")

    rng = np.random.default_rng(seed)
    normals = _sphere_points(n, rng)
    positions = BALL_RADIUS * normals
    sigma = _surface_sigma(n)

    if kind == "isotropic":
        rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        log_scales = np.full((n, 3), math.log(sigma))
        colors = rng.uniform(0.1, 0.9, size=(n, 3))
    elif kind == "needles":
        lo, hi = NEEDLE_KAPPA_RANGE
        kappa = np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))
        mid = rng.uniform(*NEEDLE_MID_RANGE, size=n)
        # variances κ:λ:1 with geometric-mean scale σ
        scales = np.stack([np.sqrt(kappa), np.sqrt(mid), np.ones(n)], axis=1) * sigma * kappa[:, None] ** -0.25
        rotations = _random_quaternions(n, rng)
        log_scales = np.log(scales)
        colors = rng.uniform(0.1, 0.9, size=(n, 3))
    else:
        rotations = _tangent_frames(normals)
        log_scales = np.log(np.tile([sigma, sigma, DISC_FLATNESS * sigma], (n, 1)))
        colors = _texture_colors(normals, texture, rng)

    scene = GaussianScene(
        positions=positions,
        rotations=rotations,
        log_scales=log_scales,
        opacity_logits=np.full(n, float(inverse_sigmoid(SYNTH_OPACITY))),
        f_dc=rgb_to_fdc(colors),
    )
    train, test = camera_ring(width, height)
    logger.info(f"synth_scene: {kind} n={n} seed={seed} texture={texture if kind == KINDS[2] else '-'}")
    return SynthScene(kind=kind, seed=seed, scene=scene, train_views=train, test_views=test)


def on_axis_gaussian(
    kappa: float = 144.0, sigma: float = 0.5, width: int = 256, height: int = 256
) -> Tuple[GaussianScene, CameraView]:
    """
    One Gaussian at the origin on the optical axis of a camera looking along +y.

    Its major axis (variance κσ²) lies along the camera's x axis, so the
    projected covariance is diagonal with condition number κ.
    """
    if kappa < 1:
        raise DomainError(f"kappa must be >= 1, got {kappa}")
    view = CameraView.look_at(
        (0.0, -CAMERA_DISTANCE, 0.0), (0.0, 0.0, 0.0),
        focal=FOCAL_PER_WIDTH * width, width=width, height=height, camera_id="axis",
    )
    scene = GaussianScene(
        positions=np.zeros((1, 3)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.log([[sigma * math.sqrt(kappa), sigma, sigma]]),
        opacity_logits=np.array([float(inverse_sigmoid(SYNTH_OPACITY))]),
        f_dc=np.zeros((1, 3)),
    )
    return scene, view


# ─── Targets ────────────────────────────────────────────────────────────────

def render_targets(
    scene: GaussianScene,
    views: Sequence[CameraView],
    mode: Optional[FilterMode] = None,
    cfg: Optional[RenderConfig] = None,
    use_cache: bool = True,
    cache_dir: Optional[str] = None,
) -> List[Tuple[CameraView, np.ndarray]]:
    """Ground-truth (camera, image) pairs rendered with the EWA filter by default."""
    mode = mode or FilterMode.ewa()
    cfg = cfg or RenderConfig()
    key = content_hash(
        [scene.positions, scene.rotations, scene.log_scales, scene.opacity_logits, scene.f_dc]
        + [np.concatenate([v.world_to_camera.ravel(), [v.fx, v.fy, v.cx, v.cy, v.width, v.height]]) for v in views],
        text=f"{mode.describe()}|{cfg.model_dump_json(exclude={'threads'})}",
    )

    def produce() -> List[np.ndarray]:
        return [render(scene, v, mode, cfg).framebuffer.rgb for v in views]

    images = cached_images(key, produce, cache_dir=cache_dir, enabled=use_cache)
    return list(zip(views, images))
