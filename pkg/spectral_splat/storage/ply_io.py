"""
Gaussian scene PLY files (binary little-endian, 3D-GS vertex layout).

Vertex properties: x y z, f_dc_0..2, opacity (logit), scale_0..2 (log),
rot_0..3 (quaternion wxyz), all float32. Any other vertex property is kept
in scene.extra and written back on save.
"""

import os
from typing import Dict

import numpy as np
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyParseError

from spectral_splat.core.scene import GaussianScene
from spectral_splat.storage.images import atomic_path
from spectral_splat.utils.errors import (
    DataError,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedEncodingError,
)
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

CORE_PROPERTIES = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def load_ply(path: str) -> GaussianScene:
    """
    Load a Gaussian scene.

    Raises:
        MalformedHeaderError: header unreadable or core properties missing.
        TruncatedPayloadError: file ends before the last vertex row.
        UnsupportedEncodingError: ASCII or big-endian PLY.
    """
    if not os.path.exists(path):
        raise DataError(f"PLY file not found: {path}")
    try:
        plydata = PlyData.read(path)
    except PlyElementParseError as e:
        raise TruncatedPayloadError(path, os.path.getsize(path), str(e)) from e
    except PlyParseError as e:
        raise MalformedHeaderError(f"{path}: {e}") from e

    if plydata.text:
        raise UnsupportedEncodingError(f"{path}: ASCII PLY is not supported; convert to binary_little_endian")
    if plydata.byte_order == ">":
        raise UnsupportedEncodingError(f"{path}: big-endian PLY is not supported; convert to binary_little_endian")
    if not plydata.elements or plydata.elements[0].name != "vertex":
        raise MalformedHeaderError(f"{path}: first element must be 'vertex'")

    vertex = plydata["vertex"]
    names = [p.name for p in vertex.properties]
    missing = [p for p in CORE_PROPERTIES if p not in names]
    if missing:
        raise MalformedHeaderError(f"{path}: missing vertex properties {missing}")

    def stack(keys):
        return np.stack([np.asarray(vertex[k], dtype=np.float64) for k in keys], axis=1)

    extras: Dict[str, np.ndarray] = {n: np.asarray(vertex[n]).copy() for n in names if n not in CORE_PROPERTIES}
    if extras:
        logger.warning(f"{path}: ignoring {len(extras)} extra vertex properties (kept for save-through)")

    scene = GaussianScene(
        positions=stack(["x", "y", "z"]),
        rotations=stack([f"rot_{i}" for i in range(4)]),
        log_scales=stack([f"scale_{i}" for i in range(3)]),
        opacity_logits=np.asarray(vertex["opacity"], dtype=np.float64),
        f_dc=stack([f"f_dc_{i}" for i in range(3)]),
        extra=extras,
    )
    logger.info(f"Loaded {len(scene)} Gaussians from {path}")
    return scene


def save_ply(scene: GaussianScene, path: str) -> str:
    """Write the scene as float32 binary little-endian PLY (atomic)."""
    dtype = [(name, "<f4") for name in CORE_PROPERTIES]
    dtype += [(name, arr.dtype.newbyteorder("<")) for name, arr in scene.extra.items()]
    elements = np.empty(len(scene), dtype=dtype)

    columns = {
        "x": scene.positions[:, 0], "y": scene.positions[:, 1], "z": scene.positions[:, 2],
        "opacity": scene.opacity_logits,
    }
    for i in range(3):
        columns[f"f_dc_{i}"] = scene.f_dc[:, i]
        columns[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        columns[f"rot_{i}"] = scene.rotations[:, i]
    for name, values in columns.items():
        elements[name] = values.astype(np.float32)
    for name, values in scene.extra.items():
        elements[name] = values

    el = PlyElement.describe(elements, "vertex")
    with atomic_path(path) as tmp:
        PlyData([el], text=False, byte_order="<").write(tmp)
    logger.info(f"Saved {len(scene)} Gaussians to {path}")
    return path
