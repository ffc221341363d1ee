"""Optimizer bookkeeping and short training runs on tiny synthetic rigs."""

import json
import math

import numpy as np
import pytest

from conftest import make_scene
from spectral_splat.optim.densify import refine
from spectral_splat.optim.trainer import (
    ADAM_BETAS,
    ADAM_EPS,
    VARIANTS,
    GaussianModel,
    TrainState,
    adam_step,
    get_expon_lr_func,
    random_init,
    resolve_variant,
    train,
)
from spectral_splat.render.backward import SceneGradients
from spectral_splat.storage.synth import render_targets, synth_scene
from spectral_splat.utils.config import DensifyConfig, LearningRates, TrainConfig
from spectral_splat.utils.errors import DomainError
from spectral_splat.utils.jsonlog import JsonLineWriter

GROUPS = ("xyz", "f_dc", "opacity", "scaling", "rotation")


def _model(scene, max_steps=100):
    return GaussianModel(scene, LearningRates(), spatial_lr_scale=1.0, max_steps=max_steps)


def _random_grads(rng, n):
    return {
        "xyz": rng.standard_normal((n, 3)),
        "f_dc": rng.standard_normal((n, 3)),
        "opacity": rng.standard_normal(n),
        "scaling": rng.standard_normal((n, 3)),
        "rotation": rng.standard_normal((n, 4)),
    }


@pytest.fixture(scope="module")
def tiny_rig():
    synth = synth_scene("isotropic", 20, seed=3, width=32, height=32)
    views = render_targets(synth.scene, synth.train_views, use_cache=False)
    return synth, views


class TestAdam:
    def test_scalar_recurrence(self, rng):
        """A constant gradient follows the hand-iterated Adam recurrence."""
        scene = make_scene(rng, 1)
        state = TrainState.create(_model(scene))
        g, lr = 0.3, 0.01
        b1, b2 = ADAM_BETAS
        p, m, v = float(scene.positions[0, 0]), 0.0, 0.0
        for t in range(1, 101):
            adam_step(state, {"xyz": np.array([[g, 0.0, 0.0]])}, lrs={"xyz": lr})
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            denom = math.sqrt(v) / math.sqrt(1 - b2 ** t) + ADAM_EPS
            p -= lr / (1 - b1 ** t) * m / denom
        assert state.scene.positions[0, 0] == pytest.approx(p, rel=1e-12)
        np.testing.assert_array_equal(state.scene.positions[0, 1:], scene.positions[0, 1:])
        assert state.iteration == 100

    def test_zero_gradients_are_identity(self, rng):
        scene = make_scene(rng, 5)
        state = TrainState.create(_model(scene))
        adam_step(state, {})
        np.testing.assert_array_equal(state.scene.positions, scene.positions)
        np.testing.assert_array_equal(state.scene.log_scales, scene.log_scales)

    def test_zero_learning_rate_is_identity(self, rng):
        scene = make_scene(rng, 5)
        state = TrainState.create(_model(scene))
        for _ in range(3):
            adam_step(state, _random_grads(rng, 5), lrs={name: 0.0 for name in GROUPS})
        after = state.scene
        for name in ("positions", "f_dc", "opacity_logits", "log_scales"):
            np.testing.assert_array_equal(getattr(after, name), getattr(scene, name))
        # renormalization may move unit quaternions by an ulp
        np.testing.assert_allclose(after.rotations, scene.rotations, atol=1e-15)

    def test_quaternions_stay_unit(self, rng):
        scene = make_scene(rng, 5)
        state = TrainState.create(_model(scene))
        for _ in range(5):
            adam_step(state, _random_grads(rng, 5), lrs={"rotation": 0.5})
        np.testing.assert_allclose(np.linalg.norm(state.scene.rotations, axis=1), 1.0, atol=1e-12)


class TestTopology:
    def test_moments_follow_their_rows(self, rng):
        scene = make_scene(rng, 5)
        model = _model(scene)
        state = TrainState.create(model)
        for _ in range(3):
            adam_step(state, _random_grads(rng, 5))
        before = {name: model.moments(name) for name in GROUPS}

        source = np.array([4, 2, -1, 0])
        new_scene = scene.select(np.array([4, 2, 1, 0]))
        model.apply_topology(new_scene, source)

        assert len(model) == 4
        for name in GROUPS:
            m1, m2 = model.moments(name)
            old1, old2 = before[name]
            for row, src in enumerate(source):
                if src < 0:
                    np.testing.assert_array_equal(m1[row], 0.0)
                    np.testing.assert_array_equal(m2[row], 0.0)
                else:
                    np.testing.assert_array_equal(m1[row], old1[src])
                    np.testing.assert_array_equal(m2[row], old2[src])
        np.testing.assert_array_equal(model.to_scene().positions, new_scene.positions)

    def test_step_after_remap(self, rng):
        scene = make_scene(rng, 6)
        state = TrainState.create(_model(scene))
        adam_step(state, _random_grads(rng, 6))
        res = refine(state.scene, np.full(6, 1.0), DensifyConfig(tau_radius=1e-6), rng, scene_extent=10.0)
        state.model.apply_topology(res.scene, res.source)
        state.reset_stats()
        n = len(res.scene)
        assert n == 12
        adam_step(state, _random_grads(rng, n))
        assert state.grad_accum.shape == (n,)
        assert np.all(np.isfinite(state.scene.positions))

    def test_densification_stats(self, rng, small_view):
        scene = make_scene(rng, 3)
        state = TrainState.create(_model(scene))
        grads = SceneGradients.zeros(3)
        grads.visible[:] = [True, False, True]
        grads.mean2d[0] = [2.0 / 16.0, 0.0]
        state.add_densification_stats(grads, small_view)
        state.add_densification_stats(grads, small_view)
        np.testing.assert_array_equal(state.grad_count, [2, 0, 2])
        np.testing.assert_allclose(state.mean_grad_norms(), [2.0, 0.0, 0.0])


class TestSchedule:
    def test_exponential_decay(self):
        f = get_expon_lr_func(1e-2, 1e-4, max_steps=100)
        assert f(0) == pytest.approx(1e-2)
        assert f(100) == pytest.approx(1e-4)
        assert f(50) == pytest.approx(1e-3)
        assert f(1000) == pytest.approx(1e-4)

    def test_variants(self):
        assert set(VARIANTS) == {
            "baseline-3dgs", "mip", "spectral", "spectral-no-split", "spectral-no-filter", "naive-regularizer",
        }
        assert resolve_variant("spectral").spectral_split
        assert resolve_variant("naive-regularizer").shape_weight == pytest.approx(0.1)
        with pytest.raises(DomainError):
            resolve_variant("mystery")


class TestRandomInit:
    def test_inside_rig(self, tiny_rig, rng):
        synth, _ = tiny_rig
        scene = random_init(synth.train_views, 50, rng)
        assert len(scene) == 50
        centroid = np.mean([v.center for v in synth.train_views], axis=0)
        assert np.all(np.linalg.norm(scene.positions - centroid, axis=1) <= 0.3 * 1.1 * 160.0)
        np.testing.assert_allclose(scene.opacities(), 0.1)


def _cfg(**kw):
    base = dict(iterations=8, refine_start=1000, log_every=4, init_points=20)
    base.update(kw)
    return TrainConfig(**base)


class TestTrain:
    def test_zero_iterations_keeps_scene(self, tiny_rig):
        synth, views = tiny_rig
        res = train(views, _cfg(iterations=0), DensifyConfig(), init_scene=synth.scene)
        np.testing.assert_array_equal(res.scene.positions, synth.scene.positions)
        assert res.losses == [] and res.metrics["count"] == 20

    def test_count_constant_without_refinement(self, tiny_rig):
        _, views = tiny_rig
        res = train(views, _cfg(), DensifyConfig(), variant="spectral")
        assert len(res.scene) == 20
        assert len(res.losses) == 8
        assert [h["iter"] for h in res.history] == [4, 8]

    def test_deterministic(self, tiny_rig):
        _, views = tiny_rig
        a = train(views, _cfg(seed=11), DensifyConfig())
        b = train(views, _cfg(seed=11), DensifyConfig())
        np.testing.assert_array_equal(a.scene.positions, b.scene.positions)
        assert a.losses == b.losses

    def test_loss_decreases_from_gray(self, tiny_rig):
        synth, views = tiny_rig
        init = synth.scene.copy()
        init.f_dc[:] = 0.0
        cfg = _cfg(iterations=48, lr=LearningRates(color=0.05), log_every=1000)
        res = train(views, cfg, DensifyConfig(), variant="baseline-3dgs", init_scene=init)
        # first and last full passes over the 8 views
        assert np.mean(res.losses[-8:]) < np.mean(res.losses[:8])

    def test_refinement_writes_events(self, tiny_rig, tmp_path):
        _, views = tiny_rig
        log = tmp_path / "train.jsonl"
        cfg = _cfg(iterations=12, refine_start=0, refine_every=5, refine_stop=11)
        with JsonLineWriter(str(log)) as writer:
            res = train(views, cfg, DensifyConfig(tau_loss=1e-12), variant="spectral", writer=writer)
        records = [json.loads(line) for line in log.read_text().splitlines()]
        events = [r for r in records if r.get("event") == "densify"]
        assert [e["iter"] for e in events] == [5, 10]
        assert len(res.state.model) == len(res.scene)
        assert res.state.grad_accum.shape == (len(res.scene),)
        assert events[-1]["count"] == len(res.scene)

    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_every_variant_runs(self, tiny_rig, variant):
        _, views = tiny_rig
        res = train(views, _cfg(iterations=3, log_every=3), DensifyConfig(), variant=variant)
        assert math.isfinite(res.losses[-1])
        assert res.metrics["variant"] == variant

    def test_regularizer_leaves_positional_accumulators(self, tiny_rig):
        """With shape learning frozen the regularizer cannot change the positional-gradient statistics."""
        _, views = tiny_rig
        needles = synth_scene("needles", 20, seed=3, width=32, height=32).scene
        cfg = _cfg(iterations=10, lr=LearningRates(scales=0.0, rotation=0.0))
        reg = train(views, cfg, DensifyConfig(), variant="naive-regularizer", init_scene=needles)
        plain = train(views, cfg, DensifyConfig(), variant="spectral-no-split", init_scene=needles)
        np.testing.assert_array_equal(reg.state.grad_accum, plain.state.grad_accum)
        np.testing.assert_array_equal(reg.state.grad_dir, plain.state.grad_dir)
        assert any(a != b for a, b in zip(reg.losses, plain.losses))

    def test_regularizer_first_step_stats_at_default_rates(self, tiny_rig):
        """Positional statistics are recorded before the first Adam step, so the shape term cannot reach them."""
        _, views = tiny_rig
        needles = synth_scene("needles", 20, seed=3, width=32, height=32).scene
        cfg = _cfg(iterations=1)
        assert cfg.lr.scales > 0 and cfg.lr.rotation > 0
        reg = train(views, cfg, DensifyConfig(), variant="naive-regularizer", init_scene=needles)
        plain = train(views, cfg, DensifyConfig(), variant="spectral-no-split", init_scene=needles)
        np.testing.assert_array_equal(reg.state.grad_accum, plain.state.grad_accum)
        np.testing.assert_array_equal(reg.state.grad_count, plain.state.grad_count)
        np.testing.assert_array_equal(reg.state.grad_dir, plain.state.grad_dir)
        assert reg.state.grad_count.sum() > 0

    def test_needs_views(self):
        with pytest.raises(DomainError):
            train([], _cfg(), DensifyConfig())
