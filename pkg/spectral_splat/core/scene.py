"""
Gaussian primitives, cameras and the world → screen projection.

Covariances are composed as Σ = R·diag(exp(2·log_scales))·Rᵀ from a wxyz
quaternion. Cameras follow the OpenCV convention (x right, y down, z forward);
pixel centres sit at integer coordinates.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from spectral_splat.core.spectral import SymMat
from spectral_splat.utils.errors import BehindCameraError, DomainError, ShapeMismatchError
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

SH_C0 = 0.28209479177387814
NEAR = 0.01
CULL_MARGIN = 16.0
ORTHONORMAL_TOL = 1e-9


# ─── Activations ────────────────────────────────────────────────────────────

def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def fdc_to_rgb(f_dc: np.ndarray) -> np.ndarray:
    """Degree-0 SH coefficient → RGB in [0, 1]."""
    return np.clip(0.5 + SH_C0 * np.asarray(f_dc, dtype=np.float64), 0.0, 1.0)


def rgb_to_fdc(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ─── Rotations ──────────────────────────────────────────────────────────────

def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise DomainError("Quaternion must be finite and non-zero")
    return q / norm


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """wxyz quaternion(s) → rotation matrix (..., 3, 3). Normalizes internally."""
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    rot = np.stack(
        [
            1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
            2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
            2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
        ],
        axis=-1,
    )
    return rot.reshape(rot.shape[:-1] + (3, 3))


def rotation_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix → wxyz unit quaternion with w ≥ 0."""
    m = np.asarray(rot, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return normalize_quaternion(q if q[0] >= 0 else -q)


def compose_covariance(rotation: np.ndarray, log_scales: np.ndarray) -> SymMat:
    """Σ = R·diag(exp(2·log_scales))·Rᵀ."""
    rot = quaternion_to_rotation(rotation)
    var = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    cov = (rot * var) @ rot.T
    return 0.5 * (cov + cov.T)


def compose_covariances(rotations: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Batched Σ from (N, 4) quaternions and (N, 3) per-axis variances."""
    rot = quaternion_to_rotation(rotations)
    cov = np.einsum("nij,nj,nkj->nik", rot, variances, rot)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# ─── Gaussian primitives ────────────────────────────────────────────────────

@dataclass
class Gaussian3D:
    """One primitive. Color is stored as the degree-0 SH coefficient."""

    position: np.ndarray
    rotation: np.ndarray
    log_scales: np.ndarray
    opacity_logit: float
    f_dc: np.ndarray
    max_sampling_rate: Optional[float] = None
    sampling_view: int = -1

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def color(self) -> np.ndarray:
        return fdc_to_rgb(self.f_dc)

    @property
    def covariance(self) -> SymMat:
        return compose_covariance(self.rotation, self.log_scales)

    @classmethod
    def create(
        cls,
        position: Sequence[float],
        scales: Sequence[float],
        rotation: Sequence[float] = (1.0, 0.0, 0.0, 0.0),
        opacity: float = 0.5,
        color: Sequence[float] = (0.5, 0.5, 0.5),
    ) -> "Gaussian3D":
        """Build from activated values (linear scales, opacity in (0,1), RGB)."""
        return cls(
            position=np.asarray(position, dtype=np.float64),
            rotation=normalize_quaternion(rotation),
            log_scales=np.log(np.asarray(scales, dtype=np.float64)),
            opacity_logit=float(inverse_sigmoid(opacity)),
            f_dc=rgb_to_fdc(color),
        )


@dataclass
class GaussianScene:
    """
    Struct-of-arrays storage for N Gaussians.

    max_sampling_rate holds NaN where ν̂ is unset; sampling_view holds −1.
    `extra` keeps unknown per-vertex PLY properties for pass-through.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    f_dc: np.ndarray
    max_sampling_rate: np.ndarray = None
    sampling_view: np.ndarray = None
    extra: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0] if np.ndim(self.positions) else 0
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.f_dc = np.asarray(self.f_dc, dtype=np.float64).reshape(-1, 3)
        if self.max_sampling_rate is None:
            self.max_sampling_rate = np.full(n, np.nan)
        if self.sampling_view is None:
            self.sampling_view = np.full(n, -1, dtype=np.int64)
        self.max_sampling_rate = np.asarray(self.max_sampling_rate, dtype=np.float64).reshape(-1)
        self.sampling_view = np.asarray(self.sampling_view, dtype=np.int64).reshape(-1)

        arrays = {
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "f_dc": self.f_dc,
            "max_sampling_rate": self.max_sampling_rate,
            "sampling_view": self.sampling_view,
            **{f"extra[{k}]": v for k, v in self.extra.items()},
        }
        for name, arr in arrays.items():
            if arr.shape[0] != n:
                raise ShapeMismatchError(f"{name} has {arr.shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        rate = self.max_sampling_rate[i]
        return Gaussian3D(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scales=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            f_dc=self.f_dc[i].copy(),
            max_sampling_rate=None if np.isnan(rate) else float(rate),
            sampling_view=int(self.sampling_view[i]),
        )

    def __iter__(self) -> Iterator[Gaussian3D]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianScene":
        if not gaussians:
            return cls.empty()
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scales for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            f_dc=np.stack([g.f_dc for g in gaussians]),
            max_sampling_rate=np.array(
                [np.nan if g.max_sampling_rate is None else g.max_sampling_rate for g in gaussians]
            ),
            sampling_view=np.array([g.sampling_view for g in gaussians], dtype=np.int64),
        )

    def select(self, index: np.ndarray) -> "GaussianScene":
        """Rows picked by an integer index array or boolean mask, in that order."""
        index = np.asarray(index)
        return GaussianScene(
            positions=self.positions[index],
            rotations=self.rotations[index],
            log_scales=self.log_scales[index],
            opacity_logits=self.opacity_logits[index],
            f_dc=self.f_dc[index],
            max_sampling_rate=self.max_sampling_rate[index],
            sampling_view=self.sampling_view[index],
            extra={k: v[index] for k, v in self.extra.items()},
        )

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        extra = {}
        for k, v in self.extra.items():
            tail = other.extra.get(k, np.zeros((len(other),) + v.shape[1:], dtype=v.dtype))
            extra[k] = np.concatenate([v, tail])
        return GaussianScene(
            positions=np.concatenate([self.positions, other.positions]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            log_scales=np.concatenate([self.log_scales, other.log_scales]),
            opacity_logits=np.concatenate([self.opacity_logits, other.opacity_logits]),
            f_dc=np.concatenate([self.f_dc, other.f_dc]),
            max_sampling_rate=np.concatenate([self.max_sampling_rate, other.max_sampling_rate]),
            sampling_view=np.concatenate([self.sampling_view, other.sampling_view]),
            extra=extra,
        )

    def copy(self) -> "GaussianScene":
        return self.select(np.arange(len(self)))

    # Activated views

    def variances(self) -> np.ndarray:
        return np.exp(2.0 * self.log_scales)

    def covariances(self) -> np.ndarray:
        return compose_covariances(self.rotations, self.variances())

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def colors(self) -> np.ndarray:
        return fdc_to_rgb(self.f_dc)


# ─── Cameras ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CameraView:
    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_id: str = ""
    image_path: Optional[str] = None

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ShapeMismatchError(f"world_to_camera must be 4×4, got {w2c.shape}")
        rot = w2c[:3, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > ORTHONORMAL_TOL or np.linalg.det(rot) <= 0:
            raise DomainError("world_to_camera rotation block is not a proper orthonormal matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"Image size must be positive, got {self.width}×{self.height}")
        object.__setattr__(self, "world_to_camera", w2c)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def zoomed(self, multiplier: float) -> "CameraView":
        """Same pose and principal point with both focal lengths scaled."""
        return replace(self, fx=self.fx * multiplier, fy=self.fy * multiplier)

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        up: Sequence[float] = (0.0, 0.0, 1.0),
        focal: float = 400.0,
        width: int = 256,
        height: int = 256,
        camera_id: str = "",
    ) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        down = -(up - up.dot(fwd) * fwd)
        if np.linalg.norm(down) < 1e-9:
            alt = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            down = -(alt - alt.dot(fwd) * fwd)
        down /= np.linalg.norm(down)
        right = np.cross(down, fwd)

        rot = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        return cls(
            world_to_camera=w2c,
            fx=focal,
            fy=focal,
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=width,
            height=height,
            camera_id=camera_id,
        )


# ─── Projection ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Splat2D:
    mean: np.ndarray
    cov: SymMat
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int = -1


def world_to_camera(g: Gaussian3D, v: CameraView) -> Tuple[np.ndarray, SymMat]:
    """μ' = Rμ + t and Σ' = RΣRᵀ."""
    rot = v.rotation
    mean = rot @ g.position + v.translation
    cov = rot @ g.covariance @ rot.T
    return mean, 0.5 * (cov + cov.T)


def projection_jacobian(mean_cam: np.ndarray, fx: float, fy: float, near: float = NEAR) -> np.ndarray:
    """Jacobian of the perspective map at μ' (2×3)."""
    x, y, z = (float(c) for c in mean_cam)
    if z <= near:
        raise BehindCameraError(f"Depth {z:.4g} is not beyond the near plane {near}")
    return np.array(
        [
            [fx / z, 0.0, -fx * x / (z * z)],
            [0.0, fy / z, -fy * y / (z * z)],
        ]
    )


def project(g: Gaussian3D, v: CameraView, index: int = -1, near: float = NEAR) -> Splat2D:
    mean_cam, cov_cam = world_to_camera(g, v)
    jac = projection_jacobian(mean_cam, v.fx, v.fy, near)
    x, y, z = mean_cam
    cov = jac @ cov_cam @ jac.T
    return Splat2D(
        mean=np.array([v.fx * x / z + v.cx, v.fy * y / z + v.cy]),
        cov=0.5 * (cov + cov.T),
        depth=float(z),
        opacity=g.opacity,
        color=g.color,
        source_index=index,
    )


def in_view(mean2d: np.ndarray, cov2d: np.ndarray, v: CameraView, margin: float = CULL_MARGIN) -> np.ndarray:
    """True where the 3σ ellipse touches the image rectangle grown by `margin` pixels."""
    mean2d = np.asarray(mean2d, dtype=np.float64).reshape(-1, 2)
    cov2d = np.asarray(cov2d, dtype=np.float64).reshape(-1, 2, 2)
    rx = 3.0 * np.sqrt(np.clip(cov2d[:, 0, 0], 0.0, None))
    ry = 3.0 * np.sqrt(np.clip(cov2d[:, 1, 1], 0.0, None))
    return (
        (mean2d[:, 0] + rx >= -margin)
        & (mean2d[:, 0] - rx <= v.width - 1 + margin)
        & (mean2d[:, 1] + ry >= -margin)
        & (mean2d[:, 1] - ry <= v.height - 1 + margin)
    )


@dataclass
class ProjectedBatch:
    """Projection of the visible subset of a scene into one view."""

    indices: np.ndarray      # (M,) rows of the scene
    mean_cam: np.ndarray     # (M, 3)
    jacobian: np.ndarray     # (M, 2, 3)
    cov_cam: np.ndarray      # (M, 3, 3)
    mean2d: np.ndarray       # (M, 2)
    cov2d: np.ndarray        # (M, 2, 2)
    culled_behind: int = 0
    culled_outside: int = 0

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def depths(self) -> np.ndarray:
        return self.mean_cam[:, 2]


def project_batch(
    positions: np.ndarray,
    covariances: np.ndarray,
    v: CameraView,
    near: float = NEAR,
    margin: float = CULL_MARGIN,
) -> ProjectedBatch:
    """
    Project N Gaussians, culling those behind the near plane or off-screen.

    Args:
        positions: (N, 3) world means.
        covariances: (N, 3, 3) world covariances.
        v: Target view.
        near: Near-plane depth ε_z.
        margin: Culling margin in pixels.

    Returns:
        ProjectedBatch holding only the surviving Gaussians.
    """
    rot, t = v.rotation, v.translation
    mean_cam = positions @ rot.T + t
    z = mean_cam[:, 2]
    front = z > near
    idx = np.nonzero(front)[0]

    mc = mean_cam[idx]
    x, y, zf = mc[:, 0], mc[:, 1], mc[:, 2]
    jac = np.zeros((idx.shape[0], 2, 3))
    jac[:, 0, 0] = v.fx / zf
    jac[:, 0, 2] = -v.fx * x / (zf * zf)
    jac[:, 1, 1] = v.fy / zf
    jac[:, 1, 2] = -v.fy * y / (zf * zf)

    cov_cam = np.einsum("ij,njk,lk->nil", rot, covariances[idx], rot)
    cov_cam = 0.5 * (cov_cam + np.swapaxes(cov_cam, -1, -2))
    cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))
    mean2d = np.stack([v.fx * x / zf + v.cx, v.fy * y / zf + v.cy], axis=-1)

    keep = in_view(mean2d, cov2d, v, margin)
    culled_behind = int(np.count_nonzero(~front))
    if culled_behind:
        logger.debug(f"project_batch: {culled_behind} Gaussian(s) behind the near plane")
    return ProjectedBatch(
        indices=idx[keep],
        mean_cam=mc[keep],
        jacobian=jac[keep],
        cov_cam=cov_cam[keep],
        mean2d=mean2d[keep],
        cov2d=cov2d[keep],
        culled_behind=culled_behind,
        culled_outside=int(np.count_nonzero(~keep)),
    )


def scene_extent(views: List[CameraView]) -> float:
    """Radius of the camera rig around its centroid, grown by 10%."""
    centers = np.stack([v.center for v in views])
    centroid = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - centroid, axis=1)))
    return 1.1 * radius if radius > 0 else 1.0
