"""Shared fixtures: seeded generators, small cameras and scenes, smooth render settings."""

import numpy as np
import pytest

from spectral_splat.core.scene import CameraView, GaussianScene, inverse_sigmoid, rgb_to_fdc
from spectral_splat.utils.config import RenderConfig


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_spd(rng: np.random.Generator, dim: int, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    if dim == 2:
        theta = rng.uniform(0, np.pi)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    else:
        rot = random_rotation(rng)
    lam = rng.uniform(lo, hi, size=dim)
    return rot @ np.diag(lam) @ rot.T


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_scene(
    rng: np.random.Generator,
    n: int,
    spread: float = 2.0,
    scale_range=(0.3, 0.8),
    opacity_range=(0.2, 0.7),
    color_range=(0.2, 0.8),
) -> GaussianScene:
    """Gaussians around the origin, sized for the `small_view` camera."""
    return GaussianScene(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        rotations=random_quaternions(rng, n),
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity_range, size=n)),
        f_dc=rgb_to_fdc(rng.uniform(*color_range, size=(n, 3))),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_view():
    """32×32 camera 10 units from the origin looking along +y (4 px per world unit at the origin)."""
    return CameraView.look_at((0.0, -10.0, 0.0), (0.0, 0.0, 0.0), focal=40.0, width=32, height=32, camera_id="small")


@pytest.fixture
def smooth_cfg():
    """Render settings without the non-differentiable skips, for finite-difference oracles."""
    return RenderConfig(alpha_min=0.0, gaussian_cutoff=1e6, transmittance_min=0.0, tile_size=16, threads=1)


@pytest.fixture
def cache_dir(tmp_path):
    return str(tmp_path / "cache")
