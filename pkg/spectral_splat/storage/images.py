"""
PNG read/write through Pillow, and atomic file writes (write temp, then rename).
"""

import json
import os
import tempfile
from contextlib import contextmanager
from typing import Any, Iterator, Union

import numpy as np
from PIL import Image

from spectral_splat.render.rasterizer import Framebuffer
from spectral_splat.utils.errors import DataError
from spectral_splat.utils.jsonlog import dumps
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)


@contextmanager
def atomic_path(path: str) -> Iterator[str]:
    """Yield a temp path next to `path`; it replaces `path` only if the block succeeds."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=os.path.splitext(path)[1], dir=directory)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_json(path: str, payload: Any) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(dumps(payload))
            f.write("\n")


def read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise DataError(f"File not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"Invalid JSON in {path}: {e}") from e


def quantize(img: Union[np.ndarray, Framebuffer]) -> np.ndarray:
    if isinstance(img, Framebuffer):
        return img.to_uint8()
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr
    arr = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return arr[..., 0] if arr.ndim == 3 and arr.shape[-1] == 1 else arr


def save_png(path: str, img: Union[np.ndarray, Framebuffer]) -> str:
    """Write an 8-bit PNG from a framebuffer, a float image in [0, 1] or a uint8 array."""
    data = quantize(img)
    with atomic_path(path) as tmp:
        Image.fromarray(data).save(tmp, format="PNG")
    logger.debug(f"Wrote {path} ({data.shape[1]}×{data.shape[0]})")
    return path


def load_png(path: str) -> np.ndarray:
    """Read an image as float64 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError as e:
        raise DataError(f"Image not found: {path}") from e
    except OSError as e:
        raise DataError(f"Cannot read image {path}: {e}") from e
    return arr / 255.0
