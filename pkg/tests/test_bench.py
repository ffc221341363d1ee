"""Scene analysis report and the zoom benchmark."""

import csv
import json
import math

import numpy as np
import pytest

from spectral_splat.bench.analyze import (
    COLUMNS,
    analyze_scene,
    spectral_statistics,
    write_report,
)
from spectral_splat.bench.zoom import (
    CSV_COLUMNS,
    analytic_kappa,
    pick_axis_splat,
    write_zoom_outputs,
    zoom_bench,
    zoom_curve_image,
)
from spectral_splat.core.filters import FilterMode
from spectral_splat.core.scene import GaussianScene, inverse_sigmoid
from spectral_splat.core.spectral import spectral_entropy
from spectral_splat.storage.synth import on_axis_gaussian, synth_scene
from spectral_splat.utils.errors import EmptySceneError, NumericalError


def _three_gaussians():
    """Round, mildly anisotropic and needle-like."""
    scales = np.array([[1.0, 1.0, 1.0], [2.0, 1.0, 3.0], [100.0, 1.0, 1.0]])
    return GaussianScene(
        positions=np.zeros((3, 3)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (3, 1)),
        log_scales=np.log(scales),
        opacity_logits=inverse_sigmoid(np.array([0.2, 0.5, 0.8])),
        f_dc=np.zeros((3, 3)),
    )


class TestAnalyze:
    def test_rows(self):
        report = analyze_scene(_three_gaussians())
        rows = report.rows
        assert [r["index"] for r in rows] == [0, 1, 2]
        assert rows[0]["kappa"] == pytest.approx(1.0)
        assert rows[0]["entropy"] == pytest.approx(math.log(3.0))
        assert rows[1]["radius"] == pytest.approx(9.0)
        assert rows[1]["kappa"] == pytest.approx(9.0)
        assert rows[1]["entropy"] == pytest.approx(spectral_entropy(np.diag([4.0, 1.0, 9.0])), abs=1e-12)
        assert rows[2]["kappa"] == pytest.approx(1e4)
        assert rows[2]["opacity"] == pytest.approx(0.8)

    def test_summary(self):
        summary = analyze_scene(_three_gaussians()).summary
        assert summary.count == 3
        assert summary.kappa_median == pytest.approx(9.0)
        assert summary.kappa_q1 == pytest.approx(5.0)
        assert summary.needle_count == 1
        assert summary.needle_threshold == 0.5

    def test_threshold(self):
        assert analyze_scene(_three_gaussians(), needle_threshold=1.0).summary.needle_count == 2

    def test_empty_scene(self):
        with pytest.raises(EmptySceneError):
            analyze_scene(GaussianScene.empty())
        with pytest.raises(EmptySceneError):
            spectral_statistics(np.zeros((0, 2)))

    def test_two_dimensional_statistics(self):
        stats = spectral_statistics(np.array([[4.0, 1.0], [1.0, 1.0]]))
        assert stats.kappa_median == pytest.approx(2.5)
        assert stats.entropy_mean == pytest.approx(0.5 * (0.500402 + math.log(2.0)), abs=1e-6)

    def test_quartiles_with_a_degenerate_gaussian(self):
        stats = spectral_statistics(np.array([[1.0, 1.0, 1.0], [9.0, 1.0, 1.0], [1.0, 0.0, 0.0]]))
        quartiles = [stats.kappa_q1, stats.kappa_median, stats.kappa_q3]
        assert not any(math.isnan(q) for q in quartiles)
        assert quartiles == sorted(quartiles)
        assert stats.kappa_q1 == pytest.approx(5.0)
        assert stats.kappa_median == pytest.approx(9.0)

    def test_degenerate_summary_in_json(self, tmp_path):
        scene = _three_gaussians()
        scene.log_scales[2, 1:] = -np.inf
        report = analyze_scene(scene)
        assert report.summary.kappa_median == pytest.approx(9.0)
        assert math.isinf(report.summary.kappa_q3)
        path = str(tmp_path / "degenerate.json")
        write_report(report, path)
        summary = json.loads(open(path, encoding="utf-8").read())["summary"]
        assert summary["kappa_median"] == pytest.approx(9.0)
        assert summary["kappa_q3"] == "inf"

    def test_json_report(self, tmp_path):
        path = str(tmp_path / "report.json")
        write_report(analyze_scene(_three_gaussians()), path)
        data = json.loads(open(path, encoding="utf-8").read())
        assert data["summary"]["count"] == 3
        assert len(data["gaussians"]) == 3
        assert set(data["gaussians"][0]) == set(COLUMNS)

    def test_csv_report(self, tmp_path):
        path = str(tmp_path / "report.csv")
        write_report(analyze_scene(_three_gaussians()), path)
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = list(reader)
        assert header == list(COLUMNS)
        assert len(rows) == 3
        assert float(rows[2][2]) == pytest.approx(1e4)

    def test_degenerate_kappa_written_as_inf(self, tmp_path):
        scene = _three_gaussians()
        scene.log_scales[2, 1:] = -np.inf
        path = str(tmp_path / "degenerate.csv")
        write_report(analyze_scene(scene), path, fmt="csv")
        rows = list(csv.DictReader(open(path, newline="", encoding="utf-8")))
        assert rows[2]["kappa"] == "inf"


class TestAnalyticKappa:
    def test_diagonal(self):
        # a=225, d=1.5625 at x=1, no kernel
        assert analytic_kappa(225.0, 0.0, 1.5625, 1.0, 1.0, 0.0) == pytest.approx(144.0)

    def test_kernel_lowers_kappa(self):
        assert analytic_kappa(4.0, 0.0, 1.0, 1.0, 1.0, 0.5) < 4.0

    def test_scaled_kernel_is_constant(self):
        x = np.array([0.5, 1.0, 4.0, 64.0])
        values = analytic_kappa(3.0, 0.4, 1.0, x, 1.0, 0.1 * x)
        np.testing.assert_allclose(values, values[0], rtol=1e-12)


class TestZoomBench:
    MODES = [FilterMode.ewa(), FilterMode.mip(), FilterMode.view_consistent()]

    def test_on_axis_gaussian(self):
        scene, view = on_axis_gaussian(kappa=144.0, width=64, height=64)
        report = zoom_bench(scene, view, self.MODES)
        assert report.axis.on_axis and report.axis.index == 0
        assert report.passed
        names = {(c.mode, c.name) for c in report.checks}
        mip, vc = FilterMode.mip().describe(), FilterMode.view_consistent().describe()
        assert (mip, "analytic-curve") in names and (mip, "monotone-increasing") in names
        assert (vc, "zoom-invariant") in names

        kappas = [p.axis_kappa for p in report.for_mode(mip)]
        assert all(b > a for a, b in zip(kappas, kappas[1:]))
        assert kappas[-1] < 144.0
        for p in report.for_mode(mip):
            assert p.axis_kappa == pytest.approx(p.axis_kappa_analytic, rel=1e-6)

        vc_kappas = [p.axis_kappa for p in report.for_mode(vc)]
        np.testing.assert_allclose(vc_kappas, vc_kappas[0], rtol=1e-9)
        assert report.kappa_ratio(vc) == pytest.approx(1.0, abs=1e-9)

    def test_x_follows_focal(self):
        scene, view = on_axis_gaussian(width=64, height=64)
        report = zoom_bench(scene, view, [FilterMode.mip()], multipliers=(1.0, 2.0))
        xs = [p.x for p in report.points]
        assert xs[1] == pytest.approx(4.0 * xs[0])

    def test_needles_scene(self):
        synth = synth_scene("needles", 40, seed=2, width=64, height=64)
        report = zoom_bench(synth.scene, synth.train_views[0], self.MODES, strict=False)
        mip, vc = FilterMode.mip().describe(), FilterMode.view_consistent().describe()
        assert report.kappa_ratio(mip) > 1.0
        assert report.kappa_ratio(vc) == pytest.approx(1.0, abs=1e-9)
        assert all(p.count == 40 for p in report.points)
        assert [c.passed for c in report.checks if c.mode == vc] == [True]

    def test_psnr_against_reference(self):
        scene, view = on_axis_gaussian(width=32, height=32)
        report = zoom_bench(
            scene, view, [FilterMode.mip()], multipliers=(1.0, 2.0),
            reference_scene=scene, reference_mode=FilterMode.mip(),
        )
        assert [p.psnr for p in report.points] == [100.0, 100.0]

    @pytest.mark.parametrize("mults", [(1.0, 1.0), (2.0, 1.0), (0.0, 1.0), ()])
    def test_bad_multipliers(self, mults):
        scene, view = on_axis_gaussian(width=32, height=32)
        with pytest.raises(NumericalError):
            zoom_bench(scene, view, [FilterMode.mip()], multipliers=mults)

    def test_nothing_in_front(self):
        scene, view = on_axis_gaussian(width=32, height=32)
        scene.positions[0] = [0.0, -500.0, 0.0]
        with pytest.raises(EmptySceneError):
            pick_axis_splat(scene, view)

    def test_outputs(self, tmp_path):
        scene, view = on_axis_gaussian(width=32, height=32)
        report = zoom_bench(scene, view, self.MODES)
        paths = write_zoom_outputs(report, str(tmp_path / "zoom"))
        assert paths["csv"].endswith("zoom.csv") and paths["png"].endswith("zoom_curve.png")

        with open(paths["csv"], newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            assert next(reader) == list(CSV_COLUMNS)
            assert len(list(reader)) == 3 * 4

        data = json.loads(open(paths["json"], encoding="utf-8").read())
        assert data["multipliers"] == [1.0, 2.0, 4.0, 8.0]
        assert len(data["checks"]) == len(report.checks)
        assert (tmp_path / "zoom_curve.png").stat().st_size > 0

    def test_curve_image_size(self):
        scene, view = on_axis_gaussian(width=32, height=32)
        image = zoom_curve_image(zoom_bench(scene, view, self.MODES), width=200, height=150)
        assert image.shape == (150, 200, 3) and image.dtype == np.uint8
        assert image.min() < 255
