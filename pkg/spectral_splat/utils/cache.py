"""
Target-render caching utility.
Uses an MD5 hash of the scene parameters, cameras and filter to create unique
filenames, so synthetic ground truth is rendered once per configuration.
"""

import hashlib
import os
from typing import Callable, Iterable, List, Optional

import numpy as np

from spectral_splat.utils.config import CACHE_DIR
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)


def content_hash(arrays: Iterable[np.ndarray], text: str = "") -> str:
    """MD5 over raw array bytes (with shapes and dtypes) plus a text tag."""
    h = hashlib.md5()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(f"{arr.dtype.str}{arr.shape}".encode("utf-8"))
        h.update(arr.tobytes())
    h.update(text.strip().encode("utf-8"))
    return h.hexdigest()


def get_cache_path(key: str, prefix: str = "targets", cache_dir: Optional[str] = None) -> str:
    """Target file path for a cache entry (without checking existence)."""
    return os.path.join(cache_dir or CACHE_DIR, f"{prefix}_{key}.npz")


def get_cached_images(key: str, cache_dir: Optional[str] = None) -> Optional[List[np.ndarray]]:
    """
    Check if images for this key already exist in cache.
    Returns the stacked images if found, else None.
    """
    filepath = get_cache_path(key, cache_dir=cache_dir)
    if not os.path.exists(filepath):
        logger.debug(f"Cache MISS for targets: {os.path.basename(filepath)}")
        return None
    try:
        with np.load(filepath) as data:
            images = [data[name] for name in sorted(data.files, key=lambda n: int(n.split("_")[1]))]
    except (OSError, ValueError, KeyError) as e:
        logger.warning(f"Ignoring unreadable cache entry {filepath}: {e}")
        return None
    logger.info(f"Cache HIT for targets: {os.path.basename(filepath)}")
    return images


def store_images(key: str, images: List[np.ndarray], cache_dir: Optional[str] = None) -> str:
    filepath = get_cache_path(key, cache_dir=cache_dir)
    os.makedirs(os.path.dirname(filepath), exist_ok=True)
    tmp = filepath + ".tmp.npz"
    np.savez_compressed(tmp, **{f"view_{i}": img for i, img in enumerate(images)})
    os.replace(tmp, filepath)
    return filepath


def cached_images(
    key: str, produce: Callable[[], List[np.ndarray]], cache_dir: Optional[str] = None, enabled: bool = True
) -> List[np.ndarray]:
    """Return cached images for `key`, producing and storing them on a miss."""
    if enabled:
        hit = get_cached_images(key, cache_dir)
        if hit is not None:
            return hit
    images = produce()
    if enabled:
        store_images(key, images, cache_dir)
    return images
