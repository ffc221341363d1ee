"""Tile rasterizer and the scene render pipeline."""

import numpy as np
import pytest

from conftest import make_scene
from spectral_splat.core.filters import FilterMode, ewa_filter
from spectral_splat.core.scene import Gaussian3D, GaussianScene, Splat2D, rgb_to_fdc
from spectral_splat.core.spectral import LN3
from spectral_splat.render.rasterizer import (
    Framebuffer,
    SplatBatch,
    filtered_spectra,
    rasterize,
    rasterize_with_tape,
    render,
    render_entropy_map,
    splat_and_render,
)
from spectral_splat.utils.config import RenderConfig
from spectral_splat.utils.errors import SingularCovarianceError


def _batch(means, covs, opacities, colors, depths):
    n = len(means)
    return SplatBatch(
        means=np.asarray(means, dtype=np.float64),
        covs=np.asarray(covs, dtype=np.float64),
        opacities=np.asarray(opacities, dtype=np.float64),
        features=np.asarray(colors, dtype=np.float64),
        depths=np.asarray(depths, dtype=np.float64),
        ids=np.arange(n),
    )


class TestRasterize:
    def test_empty_gives_background(self):
        empty = _batch(np.zeros((0, 2)), np.zeros((0, 2, 2)), [], np.zeros((0, 3)), [])
        fb = rasterize(empty, 8, 6, RenderConfig(background=(0.2, 0.4, 0.6)))
        assert fb.rgb.shape == (6, 8, 3)
        np.testing.assert_array_equal(fb.rgb, np.broadcast_to([0.2, 0.4, 0.6], (6, 8, 3)))
        np.testing.assert_array_equal(fb.alpha, 0.0)

    def test_single_splat_center(self):
        b = _batch([[10.0, 12.0]], [np.eye(2)], [0.6], [[1.0, 0.5, 0.0]], [5.0])
        fb = rasterize(b, 24, 24, RenderConfig(background=(0.0, 0.0, 1.0)))
        np.testing.assert_allclose(fb.rgb[12, 10], [0.6, 0.3, 0.4], atol=1e-12)
        assert fb.alpha[12, 10] == pytest.approx(0.6)
        # one pixel off centre
        g = 0.6 * np.exp(-0.5)
        np.testing.assert_allclose(fb.rgb[12, 11], [g, 0.5 * g, 1.0 - g], atol=1e-12)

    def test_alpha_is_capped(self):
        b = _batch([[4.0, 4.0]], [np.eye(2)], [1.0], [[1.0, 1.0, 1.0]], [1.0])
        fb = rasterize(b, 8, 8, RenderConfig())
        assert fb.alpha[4, 4] == pytest.approx(0.99)

    def test_front_to_back_by_depth(self):
        covs = [np.eye(2) * 4.0, np.eye(2) * 4.0]
        # listed back first; the nearer red splat must win
        b = _batch([[8.0, 8.0], [8.0, 8.0]], covs, [0.9, 0.9], [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]], [9.0, 2.0])
        px = rasterize(b, 16, 16).rgb[8, 8]
        np.testing.assert_allclose(px, [0.9, 0.0, 0.09], atol=1e-12)

    def test_pairs_input(self):
        s = Splat2D(mean=np.array([5.0, 5.0]), cov=np.eye(2), depth=3.0, opacity=0.5, color=np.ones(3))
        fb = rasterize([(s, ewa_filter(s, 0.3))], 10, 10)
        assert fb.alpha[5, 5] == pytest.approx(0.5)

    def test_singular_covariance(self):
        b = _batch([[4.0, 4.0]], [np.zeros((2, 2))], [0.5], [[1.0, 1.0, 1.0]], [1.0])
        with pytest.raises(SingularCovarianceError):
            rasterize(b, 8, 8)

    def test_scalar_channel(self):
        b = _batch([[4.0, 4.0]], [np.eye(2)], [0.5], [[2.0]], [1.0])
        fb = rasterize(b, 8, 8, background=[0.0])
        assert fb.rgb.shape == (8, 8, 1)
        assert fb.rgb[4, 4, 0] == pytest.approx(1.0)

    def test_tape_records_blend_order(self):
        b = _batch([[8.0, 8.0], [8.0, 8.0]], [np.eye(2)] * 2, [0.5, 0.5], np.ones((2, 3)), [9.0, 2.0])
        _, tape = rasterize_with_tape(b, 16, 16)
        tile = tape.tiles[0]
        assert tile.splats.tolist() == [1, 0]
        assert tile.alpha.shape == tile.t_before.shape == (2, 16, 16)
        # the back splat starts from the front splat's transmittance
        assert tile.t_before[1, 8, 8] == pytest.approx(0.5)
        assert tile.t_before[0, 8, 8] == 1.0


class TestDeterminism:
    """Output does not depend on tiling or worker count."""

    def test_tile_size_and_threads(self, rng, small_view):
        scene = make_scene(rng, 40)
        mode = FilterMode.view_consistent()
        ref = render(scene, small_view, mode, RenderConfig(tile_size=16, threads=1)).framebuffer
        for ts in (1, 5, 8, 32):
            fb = render(scene, small_view, mode, RenderConfig(tile_size=ts, threads=1)).framebuffer
            np.testing.assert_array_equal(fb.rgb, ref.rgb)
            np.testing.assert_array_equal(fb.alpha, ref.alpha)
            np.testing.assert_array_equal(fb.to_uint8(), ref.to_uint8())
        for threads in (2, 4):
            fb = render(scene, small_view, mode, RenderConfig(tile_size=8, threads=threads)).framebuffer
            base = render(scene, small_view, mode, RenderConfig(tile_size=8, threads=1)).framebuffer
            np.testing.assert_array_equal(fb.rgb, base.rgb)

    def test_input_order_does_not_matter(self, rng, small_view):
        scene = make_scene(rng, 40)
        shuffled = scene.select(rng.permutation(len(scene)))
        for mode in (FilterMode.ewa(), FilterMode.view_consistent()):
            a = splat_and_render(scene, small_view, mode)
            b = splat_and_render(shuffled, small_view, mode)
            np.testing.assert_array_equal(a.rgb, b.rgb)
            np.testing.assert_array_equal(a.alpha, b.alpha)

    def test_repeat_renders_identical(self, rng, small_view):
        scene = make_scene(rng, 20)
        a = splat_and_render(scene, small_view, FilterMode.mip())
        b = splat_and_render(scene, small_view, FilterMode.mip())
        np.testing.assert_array_equal(a.rgb, b.rgb)


class TestRender:
    def test_empty_scene(self, small_view):
        fb = splat_and_render(GaussianScene.empty(), small_view, FilterMode.ewa(), RenderConfig(background=(1, 1, 1)))
        np.testing.assert_array_equal(fb.rgb, 1.0)

    def test_centered_gaussian_color(self, small_view):
        scene = GaussianScene.from_gaussians([Gaussian3D.create((0, 0, 0), (0.5, 0.5, 0.5), opacity=0.9,
                                                                color=(0.2, 0.6, 0.4))])
        fb = splat_and_render(scene, small_view, FilterMode.none())
        # pixel centres at 15 and 16 straddle the projected mean 15.5
        g = 0.9 * np.exp(-0.5 * 0.5 / 4.0)
        np.testing.assert_allclose(fb.rgb[15, 15], g * np.array([0.2, 0.6, 0.4]), atol=1e-12)

    def test_mip_is_dimmer_than_ewa_for_small_splats(self, small_view):
        scene = GaussianScene.from_gaussians([Gaussian3D.create((0, 0, 0), (0.02, 0.02, 0.02), opacity=0.9)])
        ewa = splat_and_render(scene, small_view, FilterMode.ewa(0.1))
        mip = splat_and_render(scene, small_view, FilterMode.mip(0.1))
        assert mip.alpha.sum() < ewa.alpha.sum()

    def test_kernel_barely_changes_large_splats(self, rng, small_view):
        scene = make_scene(rng, 6, scale_range=(8.0, 10.0), opacity_range=(0.2, 0.5))
        bare = splat_and_render(scene, small_view, FilterMode.none())
        ewa = splat_and_render(scene, small_view, FilterMode.ewa())
        assert bare.alpha.max() > 0.1
        assert np.max(np.abs(bare.rgb - ewa.rgb)) < 1e-3

    def test_culled_gaussians_are_invisible(self, small_view):
        scene = GaussianScene.from_gaussians([Gaussian3D.create((0, -20, 0), (1, 1, 1), opacity=0.9)])
        res = render(scene, small_view, FilterMode.ewa())
        assert len(res.context.projection) == 0
        np.testing.assert_array_equal(res.framebuffer.alpha, 0.0)

    def test_record_keeps_tape(self, rng, small_view):
        scene = make_scene(rng, 5)
        assert render(scene, small_view, FilterMode.ewa()).tape is None
        assert render(scene, small_view, FilterMode.ewa(), record=True).tape is not None

    def test_filtered_spectra(self, small_view):
        scene = GaussianScene.from_gaussians([Gaussian3D.create((0, 0, 0), (1.0, 0.25, 0.25))])
        spectra = filtered_spectra(render(scene, small_view, FilterMode.ewa(0.3)))
        np.testing.assert_allclose(spectra, [[16.3, 1.3]], rtol=1e-10)

    def test_uint8_quantization(self):
        fb = Framebuffer(width=2, height=1, rgb=np.array([[[0.5, 1.2, -0.1], [0.002, 0.998, 0.25]]]),
                         alpha=np.ones((1, 2)))
        np.testing.assert_array_equal(fb.to_uint8(), [[[128, 255, 0], [1, 254, 64]]])


class TestEntropyMap:
    def test_isotropic_covered_and_sentinel(self, small_view):
        scene = GaussianScene.from_gaussians([Gaussian3D.create((0, 0, 0), (0.3, 0.3, 0.3), opacity=0.9)])
        fb = render_entropy_map(scene, small_view, FilterMode.ewa())
        assert fb.rgb.shape == (32, 32, 1)
        assert fb.alpha[15, 15] > 0 and fb.alpha[0, 0] == 0
        np.testing.assert_allclose(fb.rgb[..., 0], LN3, atol=1e-12)

    def test_needle_is_low(self, small_view):
        scene = GaussianScene(
            positions=np.zeros((1, 3)),
            rotations=np.array([[1.0, 0, 0, 0]]),
            log_scales=np.log([[1.0, 0.01, 0.01]]),
            opacity_logits=np.array([2.0]),
            f_dc=rgb_to_fdc(np.array([[0.5, 0.5, 0.5]])),
        )
        fb = render_entropy_map(scene, small_view, FilterMode.ewa())
        assert fb.rgb[15, 15, 0] < 0.01
        assert fb.rgb[0, 0, 0] == pytest.approx(LN3)
