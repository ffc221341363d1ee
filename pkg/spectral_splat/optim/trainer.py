"""
Training loop.

Each iteration renders one training view with the variant's filter, takes
the photometric loss, back-propagates analytically, adds the optional shape
regularizer and steps Adam. On refinement iterations the scene goes through
prune → gradient densify → spectral split, and optimizer state is remapped
to the new rows.

Parameters live in float64 torch tensors owned by a torch.optim.Adam
instance; gradients are computed in numpy and written into `.grad`.
"""

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from spectral_splat.core.filters import FilterMode, update_sampling_rates
from spectral_splat.core.scene import CameraView, GaussianScene, inverse_sigmoid, scene_extent
from spectral_splat.core.spectral import kappa_from_eigenvalues
from spectral_splat.optim.densify import refine
from spectral_splat.optim.losses import loss, psnr, scene_entropies, shape_regularizer, ssim
from spectral_splat.render.backward import SceneGradients, backward
from spectral_splat.render.rasterizer import render
from spectral_splat.utils.config import DensifyConfig, LearningRates, RenderConfig, TrainConfig
from spectral_splat.utils.errors import DomainError, TrainingDivergedError
from spectral_splat.utils.jsonlog import JsonLineWriter
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15
NAIVE_REGULARIZER_WEIGHT = 0.1
INIT_OPACITY = 0.1
INIT_RADIUS_FRACTION = 0.3


# ─── Variants ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Variant:
    name: str
    filter: str
    spectral_split: bool
    shape_weight: float = 0.0
    smoothing_3d: bool = False


VARIANTS: Dict[str, Variant] = {
    v.name: v
    for v in (
        Variant("baseline-3dgs", "ewa", spectral_split=False),
        Variant("mip", "mip", spectral_split=False, smoothing_3d=True),
        Variant("spectral", "view-consistent", spectral_split=True),
        Variant("spectral-no-split", "view-consistent", spectral_split=False),
        Variant("spectral-no-filter", "ewa", spectral_split=True),
        Variant("naive-regularizer", "view-consistent", spectral_split=False, shape_weight=NAIVE_REGULARIZER_WEIGHT),
    )
}


def resolve_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise DomainError(f"Unknown variant '{name}'. Expected one of: {', '.join(VARIANTS)}") from None


# ─── Learning-rate schedule ─────────────────────────────────────────────────

def get_expon_lr_func(
    lr_init: float, lr_final: float, max_steps: int, lr_delay_steps: int = 0, lr_delay_mult: float = 1.0
) -> Callable[[int], float]:
    """Log-linear decay from lr_init to lr_final over max_steps, with an optional warm-up."""

    def helper(step: int) -> float:
        if step < 0 or (lr_init == 0.0 and lr_final == 0.0):
            return 0.0
        if lr_delay_steps > 0:
            delay_rate = lr_delay_mult + (1 - lr_delay_mult) * math.sin(
                0.5 * math.pi * min(max(step / lr_delay_steps, 0.0), 1.0)
            )
        else:
            delay_rate = 1.0
        t = min(max(step / max(max_steps, 1), 0.0), 1.0)
        log_lerp = math.exp(math.log(lr_init) * (1 - t) + math.log(lr_final) * t)
        return delay_rate * log_lerp

    return helper


# ─── Optimizer-backed parameters ────────────────────────────────────────────

class GaussianModel:
    """Gaussian parameters as float64 torch Parameters, one Adam group per attribute."""

    def __init__(self, scene: GaussianScene, lr: LearningRates, spatial_lr_scale: float, max_steps: int):
        def param(a: np.ndarray) -> nn.Parameter:
            return nn.Parameter(torch.from_numpy(np.array(a, dtype=np.float64)).requires_grad_(True))

        self._xyz = param(scene.positions)
        self._f_dc = param(scene.f_dc)
        self._opacity = param(scene.opacity_logits)
        self._scaling = param(scene.log_scales)
        self._rotation = param(scene.rotations)
        self._aux = scene.select(np.arange(len(scene)))  # ν̂, sampling view, PLY extras
        self.spatial_lr_scale = spatial_lr_scale

        groups = [
            {"params": [self._xyz], "lr": lr.position_init * spatial_lr_scale, "name": "xyz"},
            {"params": [self._f_dc], "lr": lr.color, "name": "f_dc"},
            {"params": [self._opacity], "lr": lr.opacity, "name": "opacity"},
            {"params": [self._scaling], "lr": lr.scales, "name": "scaling"},
            {"params": [self._rotation], "lr": lr.rotation, "name": "rotation"},
        ]
        self.optimizer = torch.optim.Adam(groups, lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.xyz_scheduler_args = get_expon_lr_func(
            lr_init=lr.position_init * spatial_lr_scale,
            lr_final=lr.position_final * spatial_lr_scale,
            max_steps=max_steps,
        )

    def __len__(self) -> int:
        return self._xyz.shape[0]

    def update_learning_rate(self, iteration: int) -> float:
        for group in self.optimizer.param_groups:
            if group["name"] == "xyz":
                lr = self.xyz_scheduler_args(iteration)
                group["lr"] = lr
                return lr
        return 0.0

    def to_scene(self) -> GaussianScene:
        scene = self._aux.select(np.arange(len(self._aux)))
        with torch.no_grad():
            scene.positions = self._xyz.detach().numpy().copy()
            scene.f_dc = self._f_dc.detach().numpy().copy()
            scene.opacity_logits = self._opacity.detach().numpy().copy()
            scene.log_scales = self._scaling.detach().numpy().copy()
            scene.rotations = self._rotation.detach().numpy().copy()
        return scene

    def set_sampling_rates(self, rates: np.ndarray, views: np.ndarray) -> None:
        self._aux.max_sampling_rate = rates.copy()
        self._aux.sampling_view = views.copy()

    def _params(self) -> Dict[str, nn.Parameter]:
        return {g["name"]: g["params"][0] for g in self.optimizer.param_groups}

    def _bind(self, tensors: Dict[str, nn.Parameter]) -> None:
        self._xyz = tensors["xyz"]
        self._f_dc = tensors["f_dc"]
        self._opacity = tensors["opacity"]
        self._scaling = tensors["scaling"]
        self._rotation = tensors["rotation"]

    def _remap_optimizer(self, source: np.ndarray, new_values: Dict[str, np.ndarray]) -> Dict[str, nn.Parameter]:
        """
        Swap every parameter for its new rows. Rows continuing an old row keep
        its Adam moments; new rows start from zero.
        """
        src = torch.from_numpy(source)
        carried = src >= 0
        optimizable = {}
        for group in self.optimizer.param_groups:
            assert len(group["params"]) == 1
            old = group["params"][0]
            new_tensor = torch.from_numpy(np.array(new_values[group["name"]], dtype=np.float64))
            stored_state = self.optimizer.state.get(old, None)

            if stored_state is not None:
                for key in ("exp_avg", "exp_avg_sq"):
                    moved = torch.zeros_like(new_tensor)
                    moved[carried] = stored_state[key][src[carried]]
                    stored_state[key] = moved
                del self.optimizer.state[old]
                group["params"][0] = nn.Parameter(new_tensor.requires_grad_(True))
                self.optimizer.state[group["params"][0]] = stored_state
            else:
                group["params"][0] = nn.Parameter(new_tensor.requires_grad_(True))
            optimizable[group["name"]] = group["params"][0]
        return optimizable

    def apply_topology(self, scene: GaussianScene, source: np.ndarray) -> None:
        tensors = self._remap_optimizer(
            source,
            {
                "xyz": scene.positions,
                "f_dc": scene.f_dc,
                "opacity": scene.opacity_logits,
                "scaling": scene.log_scales,
                "rotation": scene.rotations,
            },
        )
        self._bind(tensors)
        self._aux = scene.select(np.arange(len(scene)))

    def moments(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """Adam (first, second) moments for one attribute; zeros before the first step."""
        p = self._params()[name]
        state = self.optimizer.state.get(p, {})
        if "exp_avg" not in state:
            z = np.zeros(tuple(p.shape))
            return z, z.copy()
        return state["exp_avg"].numpy().copy(), state["exp_avg_sq"].numpy().copy()


@dataclass
class TrainState:
    model: GaussianModel
    grad_accum: np.ndarray
    grad_count: np.ndarray
    grad_dir: np.ndarray
    iteration: int = 0

    @classmethod
    def create(cls, model: GaussianModel) -> "TrainState":
        n = len(model)
        return cls(model=model, grad_accum=np.zeros(n), grad_count=np.zeros(n), grad_dir=np.zeros((n, 3)))

    @property
    def scene(self) -> GaussianScene:
        return self.model.to_scene()

    def reset_stats(self) -> None:
        n = len(self.model)
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n)
        self.grad_dir = np.zeros((n, 3))

    def add_densification_stats(self, grads: SceneGradients, view: CameraView) -> None:
        """Accumulate ‖∇μ_proj L‖ in normalized device units for visible Gaussians."""
        vis = grads.visible
        ndc = grads.mean2d[vis] * (0.5 * np.array([view.width, view.height]))
        self.grad_accum[vis] += np.linalg.norm(ndc, axis=1)
        self.grad_count[vis] += 1
        self.grad_dir[vis] += grads.positions[vis]

    def mean_grad_norms(self) -> np.ndarray:
        return np.divide(self.grad_accum, self.grad_count, out=np.zeros_like(self.grad_accum),
                         where=self.grad_count > 0)


def adam_step(
    state: TrainState, grads: Dict[str, np.ndarray], lrs: Optional[Dict[str, float]] = None
) -> TrainState:
    """
    One Adam update (β = (0.9, 0.999), ε = 1e-15) followed by quaternion renormalization.

    Args:
        state: Training state owning the optimizer.
        grads: Gradient per parameter group name (xyz, f_dc, opacity, scaling, rotation);
               missing groups get zero gradients.
        lrs: Optional learning-rate override per group for this and later steps.
    """
    model = state.model
    params = model._params()
    for group in model.optimizer.param_groups:
        if lrs and group["name"] in lrs:
            group["lr"] = lrs[group["name"]]
    for name, p in params.items():
        g = grads.get(name)
        p.grad = torch.zeros_like(p) if g is None else torch.from_numpy(np.array(g, dtype=np.float64)).reshape(p.shape)
    model.optimizer.step()
    model.optimizer.zero_grad(set_to_none=True)
    with torch.no_grad():
        rot = params["rotation"]
        rot /= torch.linalg.norm(rot, dim=-1, keepdim=True)
    state.iteration += 1
    return state


# ─── Initialisation and evaluation ──────────────────────────────────────────

def random_init(views: Sequence[CameraView], n: int, rng: np.random.Generator) -> GaussianScene:
    """
    Uniform points in a ball around the camera rig's centroid, scaled to the
    rig; scales from the mean squared distance to the 3 nearest neighbours.
    """
    centroid = np.mean([v.center for v in views], axis=0)
    radius = INIT_RADIUS_FRACTION * scene_extent(list(views))
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    positions = centroid + direction * radius * rng.random(n)[:, None] ** (1.0 / 3.0)

    d2 = np.sum((positions[:, None, :] - positions[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    k = min(3, max(n - 1, 1))
    nearest = np.sort(d2, axis=1)[:, :k] if n > 1 else np.full((n, 1), radius ** 2)
    dist2 = np.clip(np.mean(nearest, axis=1), 1e-7, None)
    log_scale = np.log(np.sqrt(dist2))

    return GaussianScene(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(log_scale[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(inverse_sigmoid(INIT_OPACITY))),
        f_dc=np.zeros((n, 3)),
    )


def evaluate(
    scene: GaussianScene,
    views: Sequence[Tuple[CameraView, np.ndarray]],
    mode: FilterMode,
    cfg: RenderConfig,
    smoothing_s: Optional[float] = None,
) -> Dict[str, float]:
    if not views:
        return {}
    psnrs, ssims = [], []
    for cam, target in views:
        fb = render(scene, cam, mode, cfg, smoothing_s).framebuffer
        psnrs.append(psnr(fb, target))
        ssims.append(ssim(fb, target))
    return {"psnr_mean": float(np.mean(psnrs)), "ssim_mean": float(np.mean(ssims)), "psnr": psnrs}


def shape_stats(scene: GaussianScene) -> Dict[str, Optional[float]]:
    if len(scene) == 0:
        return {"entropy_mean": None, "kappa_median": None, "count": 0}
    var = scene.variances()
    return {
        "entropy_mean": float(np.mean(scene_entropies(scene))),
        "kappa_median": float(np.median(kappa_from_eigenvalues(var))),
        "count": len(scene),
    }


# ─── Loop ───────────────────────────────────────────────────────────────────

@dataclass
class TrainResult:
    state: TrainState
    scene: GaussianScene
    history: List[Dict] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    metrics: Dict = field(default_factory=dict)


def train(
    views: Sequence[Tuple[CameraView, np.ndarray]],
    cfg: TrainConfig,
    dcfg: DensifyConfig,
    mode: Optional[FilterMode] = None,
    variant: str = "spectral",
    render_cfg: Optional[RenderConfig] = None,
    test_views: Sequence[Tuple[CameraView, np.ndarray]] = (),
    init_scene: Optional[GaussianScene] = None,
    writer: Optional[JsonLineWriter] = None,
) -> TrainResult:
    """
    Fit a Gaussian scene to posed images.

    Args:
        views: Training (camera, image) pairs, images (H, W, 3) in [0, 1].
        cfg: Iterations, learning rates, loss weights, refinement schedule.
        dcfg: Densification thresholds.
        mode: Screen-space filter; None uses the variant's default.
        variant: One of VARIANTS.
        render_cfg: Rasterizer settings.
        test_views: Held-out pairs evaluated at the end.
        init_scene: Starting scene; random init from the camera rig when None.
        writer: JSON-lines sink for per-epoch metrics and densification stats.

    Raises:
        TrainingDivergedError: on a non-finite loss.
    """
    if not views:
        raise DomainError("train needs at least one view")
    var = resolve_variant(variant)
    mode = mode or FilterMode.from_name(var.filter)
    if mode.exact:
        logger.info("Exact view-consistent kernel is render-only; training uses the kernel function")
        mode = replace(mode, exact=False)
    rcfg = render_cfg or RenderConfig()
    if cfg.deterministic:
        torch.set_num_threads(1)
        rcfg = rcfg.model_copy(update={"threads": 1})

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    cams = [c for c, _ in views]
    extent = scene_extent(cams)
    scene = init_scene.copy() if init_scene is not None else random_init(cams, cfg.init_points, rng)
    update_sampling_rates(scene, cams, near=rcfg.near)

    use_smoothing = var.smoothing_3d if cfg.smoothing_3d is None else cfg.smoothing_3d
    smoothing_s = cfg.smoothing_s if use_smoothing else None
    shape_weight = cfg.lambda_shape if cfg.lambda_shape > 0 else var.shape_weight
    refine_start, refine_stop = cfg.refine_window()

    model = GaussianModel(scene, cfg.lr, extent, cfg.iterations)
    state = TrainState.create(model)
    result = TrainResult(state=state, scene=scene)
    logger.info(
        f"train: variant={var.name} filter={mode.describe()} split={var.spectral_split} "
        f"shape_weight={shape_weight} smoothing={smoothing_s} N={len(scene)} extent={extent:.3g}"
    )

    schedule: List[int] = []
    started = time.time()
    for it in range(1, cfg.iterations + 1):
        model.update_learning_rate(it)
        if not schedule:
            schedule = list(rng.permutation(len(views)))
        cam, target = views[schedule.pop()]
        scene = model.to_scene()

        res = render(scene, cam, mode, rcfg, smoothing_s, record=True)
        value, grad_img = loss(res.framebuffer, target, cfg.lambda_dssim)
        grads = backward(res, grad_img, scene)
        param_grads = {
            "xyz": grads.positions,
            "f_dc": grads.f_dc,
            "opacity": grads.opacity_logits,
            "scaling": grads.log_scales,
            "rotation": grads.rotations,
        }
        if shape_weight > 0:
            reg, g_log, g_rot = shape_regularizer(scene)
            value += shape_weight * reg
            param_grads["scaling"] = param_grads["scaling"] + shape_weight * g_log
            param_grads["rotation"] = param_grads["rotation"] + shape_weight * g_rot
        if not math.isfinite(value):
            raise TrainingDivergedError(f"Loss became {value} at iteration {it}")
        result.losses.append(value)

        state.add_densification_stats(grads, cam)
        adam_step(state, param_grads)

        if refine_start < it <= refine_stop and it % cfg.refine_every == 0:
            refined = refine(
                model.to_scene(),
                state.mean_grad_norms(),
                dcfg,
                rng,
                extent,
                spectral=var.spectral_split,
                grad_dirs=state.grad_dir,
            )
            update_sampling_rates(refined.scene, cams, near=rcfg.near)
            model.apply_topology(refined.scene, refined.source)
            state.reset_stats()
            if writer:
                writer.write({"event": "densify", "iter": it, **refined.stats.as_dict(), "count": len(refined.scene)})

        if it % cfg.log_every == 0 or it == cfg.iterations:
            current = model.to_scene()
            record = {
                "iter": it,
                "loss": value,
                "psnr_mean": evaluate(current, views, mode, rcfg, smoothing_s).get("psnr_mean"),
                **shape_stats(current),
            }
            result.history.append(record)
            if writer:
                writer.write(record)
            logger.info(
                f"iter {it}: loss={value:.5f} psnr={record['psnr_mean']:.2f} "
                f"H={record['entropy_mean']} N={record['count']}"
            )

    final = model.to_scene()
    result.scene = final
    result.metrics = {
        "variant": var.name,
        "iterations": cfg.iterations,
        "seconds": time.time() - started,
        "train": evaluate(final, views, mode, rcfg, smoothing_s),
        "test": evaluate(final, test_views, mode, rcfg, smoothing_s),
        **shape_stats(final),
    }
    return result
