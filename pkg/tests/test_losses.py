"""Photometric loss, SSIM/PSNR and the entropy regularizer."""

import math

import numpy as np
import pytest

from conftest import make_scene
from spectral_splat.core.scene import GaussianScene
from spectral_splat.core.spectral import LN3
from spectral_splat.optim.losses import (
    dssim,
    loss,
    psnr,
    scene_entropy_metric,
    shape_regularizer,
    ssim,
)
from spectral_splat.utils.errors import EmptySceneError, ShapeMismatchError


def _reference_ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Gaussian-window SSIM with zero padding, written out directly in numpy."""
    coords = np.arange(11) - 5
    g = np.exp(-(coords ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    w = np.outer(g, g)

    def blur(img):
        h, wd = img.shape
        padded = np.pad(img, 5)
        out = np.zeros_like(img)
        for dy in range(11):
            for dx in range(11):
                out += w[dy, dx] * padded[dy:dy + h, dx:dx + wd]
        return out

    maps = []
    for c in range(x.shape[2]):
        a, b = x[..., c], y[..., c]
        mu1, mu2 = blur(a), blur(b)
        s11 = blur(a * a) - mu1 ** 2
        s22 = blur(b * b) - mu2 ** 2
        s12 = blur(a * b) - mu1 * mu2
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        maps.append(((2 * mu1 * mu2 + c1) * (2 * s12 + c2)) / ((mu1 ** 2 + mu2 ** 2 + c1) * (s11 + s22 + c2)))
    return float(np.mean(maps))


def _checkerboard(h, w, lo=0.1, hi=0.9):
    yy, xx = np.mgrid[0:h, 0:w]
    board = np.where((yy + xx) % 2 == 0, hi, lo)
    return np.repeat(board[..., None], 3, axis=2)


class TestSSIM:
    def test_identical_images(self, rng):
        img = rng.uniform(size=(20, 24, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)
        assert dssim(img, img) == pytest.approx(0.0, abs=1e-12)

    def test_matches_reference(self, rng):
        a = rng.uniform(size=(18, 22, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(_reference_ssim(a, b), abs=1e-10)

    def test_inverted_pattern_is_near_max(self):
        a = _checkerboard(32, 32)
        assert dssim(a, 1.0 - a) > 0.9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            ssim(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestPSNR:
    def test_uniform_error(self):
        a = np.full((8, 8, 3), 0.5)
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_identical_is_capped(self):
        a = np.full((8, 8, 3), 0.25)
        assert psnr(a, a) == 100.0


class TestLoss:
    def test_pure_l1(self, rng):
        a = rng.uniform(size=(6, 6, 3))
        b = rng.uniform(size=(6, 6, 3))
        value, grad = loss(a, b, lambda_dssim=0.0)
        assert value == pytest.approx(np.mean(np.abs(a - b)))
        np.testing.assert_allclose(grad, np.sign(a - b) / a.size)

    def test_mixed_value(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        b = rng.uniform(size=(16, 16, 3))
        value, _ = loss(a, b, lambda_dssim=0.2)
        assert value == pytest.approx(0.8 * np.mean(np.abs(a - b)) + 0.2 * dssim(a, b), rel=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        a = rng.uniform(0.2, 0.8, size=(14, 14, 3))
        b = rng.uniform(0.2, 0.8, size=(14, 14, 3))
        _, grad = loss(a, b, 0.2)
        h = 1e-6
        for idx in [(0, 0, 0), (7, 3, 1), (13, 13, 2), (5, 9, 0)]:
            plus, minus = a.copy(), a.copy()
            plus[idx] += h
            minus[idx] -= h
            fd = (loss(plus, b, 0.2)[0] - loss(minus, b, 0.2)[0]) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_zero_for_identical(self, rng):
        a = rng.uniform(size=(12, 12, 3))
        value, _ = loss(a, a, 0.2)
        assert value == pytest.approx(0.0, abs=1e-12)


def _single(scales):
    return GaussianScene(
        positions=np.zeros((1, 3)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        log_scales=np.log([scales]),
        opacity_logits=np.zeros(1),
        f_dc=np.zeros((1, 3)),
    )


class TestShapeRegularizer:
    def test_needle_value(self):
        value, _, _ = shape_regularizer(_single([5.0, 1.0, 1.0]))
        assert value == pytest.approx(0.7832, abs=1e-4)

    def test_isotropic_is_zero(self):
        value, g_log, g_rot = shape_regularizer(_single([2.0, 2.0, 2.0]))
        assert value == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(g_log, 0.0, atol=1e-15)
        np.testing.assert_array_equal(g_rot, 0.0)

    def test_gradient_matches_finite_differences(self, rng):
        scene = make_scene(rng, 6)
        _, g_log, _ = shape_regularizer(scene)
        h = 1e-6
        for i in range(6):
            for k in range(3):
                plus, minus = scene.copy(), scene.copy()
                plus.log_scales[i, k] += h
                minus.log_scales[i, k] -= h
                fd = (shape_regularizer(plus)[0] - shape_regularizer(minus)[0]) / (2 * h)
                assert g_log[i, k] == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_independent_of_rotation(self, rng):
        scene = make_scene(rng, 4)
        rotated = scene.copy()
        rotated.rotations = rng.standard_normal((4, 4))
        assert shape_regularizer(scene)[0] == shape_regularizer(rotated)[0]

    def test_empty(self):
        value, g_log, g_rot = shape_regularizer(GaussianScene.empty())
        assert value == 0.0 and g_log.shape == (0, 3) and g_rot.shape == (0, 4)


class TestEntropyMetric:
    def test_mean_over_gaussians(self):
        scene = _single([1.0, 1.0, 1.0]).concat(_single([5.0, 1.0, 1.0]))
        expected = 0.5 * (LN3 + (LN3 - 0.78318))
        assert scene_entropy_metric(scene) == pytest.approx(expected, abs=1e-4)

    def test_empty(self):
        with pytest.raises(EmptySceneError):
            scene_entropy_metric(GaussianScene.empty())

    def test_bounds(self, rng):
        value = scene_entropy_metric(make_scene(rng, 30))
        assert 0.0 <= value <= math.log(3.0)
