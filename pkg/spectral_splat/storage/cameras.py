"""
Camera rig files.

Schema: a JSON list of objects
    {id, width, height, fx, fy, cx, cy, world_to_camera: [16 floats, row-major], image_path?}
"""

from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from spectral_splat.core.scene import CameraView, quaternion_to_rotation
from spectral_splat.storage.images import read_json, write_json
from spectral_splat.utils.errors import CameraFileError, DataError, WorkbenchError
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

FILE_ORTHONORMAL_TOL = 1e-6
REQUIRED_KEYS = ("id", "width", "height", "fx", "fy", "cx", "cy", "world_to_camera")


def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def camera_from_dict(entry: Dict[str, Any]) -> CameraView:
    missing = [k for k in REQUIRED_KEYS if k not in entry]
    if missing:
        raise CameraFileError(f"Camera entry missing keys {missing}")
    try:
        w2c = np.asarray(entry["world_to_camera"], dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise CameraFileError(f"Camera {entry['id']}: world_to_camera is not numeric") from e
    if w2c.size != 16:
        raise CameraFileError(f"Camera {entry['id']}: world_to_camera needs 16 values, got {w2c.size}")
    w2c = w2c.reshape(4, 4)

    rot = w2c[:3, :3]
    err = float(np.max(np.abs(rot @ rot.T - np.eye(3))))
    if err > FILE_ORTHONORMAL_TOL or np.linalg.det(rot) <= 0:
        raise CameraFileError(f"Camera {entry['id']}: rotation not orthonormal (max error {err:.2e})")
    # file precision is 1e-6, CameraView wants 1e-9
    w2c[:3, :3] = _orthonormalize(rot)

    try:
        return CameraView(
            world_to_camera=w2c,
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            width=int(entry["width"]),
            height=int(entry["height"]),
            camera_id=str(entry["id"]),
            image_path=entry.get("image_path"),
        )
    except WorkbenchError as e:
        raise CameraFileError(f"Camera {entry['id']}: {e}") from e


def camera_to_dict(view: CameraView) -> Dict[str, Any]:
    entry = {
        "id": view.camera_id,
        "width": view.width,
        "height": view.height,
        "fx": view.fx,
        "fy": view.fy,
        "cx": view.cx,
        "cy": view.cy,
        "world_to_camera": view.world_to_camera.reshape(-1).tolist(),
    }
    if view.image_path:
        entry["image_path"] = view.image_path
    return entry


def load_cameras(path: str) -> List[CameraView]:
    try:
        raw = read_json(path)
    except DataError as e:
        raise CameraFileError(str(e)) from e
    if not isinstance(raw, list):
        raise CameraFileError(f"{path}: expected a JSON list of cameras")
    views = [camera_from_dict(entry) for entry in raw]
    logger.info(f"Loaded {len(views)} camera(s) from {path}")
    return views


def save_cameras(views: Sequence[CameraView], path: str) -> str:
    write_json(path, [camera_to_dict(v) for v in views])
    logger.info(f"Saved {len(views)} camera(s) to {path}")
    return path


def from_colmap_like(
    qvec: Sequence[float],
    tvec: Sequence[float],
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    width: int,
    height: int,
    camera_id: str = "",
    image_path: Optional[str] = None,
) -> CameraView:
    """
    Map COLMAP-style extrinsics onto a CameraView.

    COLMAP stores the world-to-camera rotation as a wxyz quaternion `qvec` and
    translation `tvec` (x_cam = R·x_world + t) in the OpenCV camera frame,
    which is the frame CameraView uses, so the mapping is direct. COLMAP pixel
    centres sit at half-integers; cx, cy are shifted by −0.5 to integer centres.
    """
    w2c = np.eye(4)
    w2c[:3, :3] = quaternion_to_rotation(np.asarray(qvec, dtype=np.float64))
    w2c[:3, 3] = np.asarray(tvec, dtype=np.float64)
    return CameraView(
        world_to_camera=w2c,
        fx=fx,
        fy=fy,
        cx=cx - 0.5,
        cy=cy - 0.5,
        width=width,
        height=height,
        camera_id=camera_id,
        image_path=image_path,
    )
