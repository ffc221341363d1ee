"""
The blue → green entropy colormap and its colorbar strip, plus matplotlib
line plots rendered off-screen. Output images are uint8 RGB arrays.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np

from spectral_splat.core.spectral import LN3

DPI = 100

BLUE = np.array([0.0, 0.0, 1.0])
GREEN = np.array([0.0, 1.0, 0.0])
SENTINEL = (0.0, 0.0, 0.0)

PALETTE = [(0.85, 0.2, 0.2), (0.2, 0.45, 0.85), (0.2, 0.65, 0.3), (0.6, 0.3, 0.7)]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# ─── Colormaps ──────────────────────────────────────────────────────────────

def blue_green(values: np.ndarray, lo: float = 0.0, hi: float = LN3) -> np.ndarray:
    """Low values blue, high values green."""
    t = np.clip((np.asarray(values, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)[..., None]
    return (1.0 - t) * BLUE + t * GREEN


def colorize_entropy(
    values: np.ndarray, covered: np.ndarray, sentinel: Sequence[float] = SENTINEL
) -> np.ndarray:
    """Entropy map → uint8 RGB; uncovered pixels get the sentinel color."""
    img = blue_green(values)
    img[~covered] = sentinel
    return to_uint8(img)


def colorbar(width: int = 256, height: int = 16, lo: float = 0.0, hi: float = LN3) -> np.ndarray:
    ramp = np.linspace(lo, hi, width)
    return to_uint8(np.broadcast_to(blue_green(ramp, lo, hi), (height, width, 3)))


# ─── Line plots ─────────────────────────────────────────────────────────────

@dataclass
class Series:
    xs: Sequence[float]
    ys: Sequence[float]
    color: Tuple[float, float, float] = PALETTE[0]
    label: Optional[str] = None
    lines: bool = True
    markers: bool = False


def plot_series(
    series: List[Series],
    width: int = 480,
    height: int = 320,
    log_x: bool = True,
    log_y: bool = False,
    title: Optional[str] = None,
    xlabel: Optional[str] = None,
    ylabel: Optional[str] = None,
) -> np.ndarray:
    """Draw series into a `height`×`width` uint8 RGB image."""
    fig, ax = plt.subplots(figsize=(width / DPI, height / DPI), dpi=DPI)
    try:
        for s in series:
            style = ("-" if s.lines else "") + ("o" if s.markers else "")
            ax.plot(s.xs, s.ys, style, color=s.color, label=s.label, markersize=4, linewidth=1.2)
        if log_x:
            ax.set_xscale("log")
        if log_y:
            ax.set_yscale("log")
        if title:
            ax.set_title(title, fontsize=9)
        if xlabel:
            ax.set_xlabel(xlabel, fontsize=8)
        if ylabel:
            ax.set_ylabel(ylabel, fontsize=8)
        if any(s.label for s in series):
            ax.legend(fontsize=7)
        ax.tick_params(labelsize=7)
        fig.tight_layout()
        fig.canvas.draw()
        return np.asarray(fig.canvas.buffer_rgba())[..., :3].copy()
    finally:
        plt.close(fig)
