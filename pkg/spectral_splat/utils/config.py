"""
Workbench configuration.
Environment variables (via .env) for process-level knobs, pydantic models for
everything a run can be configured with from a TOML/JSON file or CLI flags.
"""

import json
import os
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: API-identical backport
    import tomli as tomllib
from typing import Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator, model_validator

from spectral_splat.core.filters import FilterKind, FilterMode
from spectral_splat.utils.errors import DataError

# Load environment variables from .env file
load_dotenv()

BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

THREADS = max(1, int(os.getenv("SPECTRAL_SPLAT_THREADS", "1")))
CACHE_DIR = os.getenv("SPECTRAL_SPLAT_CACHE_DIR", os.path.join(BASE_DIR, "data", "cache"))


# ─── Filter ─────────────────────────────────────────────────────────────────

class FilterConfig(BaseModel):
    mode: str = "view-consistent"
    s: Optional[float] = None
    s0: float = 0.1
    exact_blur: bool = False

    @field_validator("mode")
    @classmethod
    def _known_mode(cls, v: str) -> str:
        FilterKind.parse(v)
        return v

    @field_validator("s0")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("filter.s0 must be > 0")
        return v

    def to_mode(self) -> FilterMode:
        return FilterMode.from_name(self.mode, s=self.s, s0=self.s0, exact=self.exact_blur)


# ─── Densification ──────────────────────────────────────────────────────────

class DensifyConfig(BaseModel):
    tau_loss: float = 2e-4
    tau_radius: Optional[float] = None  # world units², defaults to (0.01 * scene_extent)²
    tau_spectral: float = 0.5
    k: float = 0.6
    k0: float = 1.0
    K: int = 2
    eps_o: float = 0.005
    kappa_max: float = 1e8
    baseline_split_factor: float = 1.6

    @model_validator(mode="after")
    def _check(self) -> "DensifyConfig":
        if self.k <= 0:
            raise ValueError("densify.k must be > 0")
        if self.k0 < 1:
            raise ValueError("densify.k0 must be >= 1")
        if self.K < 2:
            raise ValueError("densify.K must be >= 2")
        if not 0 < self.eps_o < 1:
            raise ValueError("densify.eps_o must lie in (0, 1)")
        return self

    def radius_threshold(self, scene_extent: float) -> float:
        if self.tau_radius is not None:
            return self.tau_radius
        return (0.01 * scene_extent) ** 2


# ─── Rendering ──────────────────────────────────────────────────────────────

class RenderConfig(BaseModel):
    tile_size: int = 16
    gaussian_cutoff: float = 9.0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    transmittance_min: float = 1e-4
    near: float = 0.01
    cull_margin: float = 16.0
    threads: int = Field(default_factory=lambda: THREADS)

    @model_validator(mode="after")
    def _check(self) -> "RenderConfig":
        if self.tile_size < 1:
            raise ValueError("render.tile_size must be >= 1")
        if self.gaussian_cutoff <= 0:
            raise ValueError("render.gaussian_cutoff must be > 0")
        if not 0 < self.alpha_max <= 1:
            raise ValueError("render.alpha_max must lie in (0, 1]")
        return self


# ─── Training ───────────────────────────────────────────────────────────────

class LearningRates(BaseModel):
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    scales: float = 5e-3
    rotation: float = 1e-3
    opacity: float = 5e-2
    color: float = 2.5e-3


class TrainConfig(BaseModel):
    lambda_dssim: float = 0.2
    lambda_shape: float = 0.0
    iterations: int = 3000
    refine_every: int = 100
    refine_start: int = 500
    refine_stop: Optional[int] = None
    lr: LearningRates = Field(default_factory=LearningRates)
    seed: int = 0
    log_every: int = 100
    smoothing_3d: Optional[bool] = None
    smoothing_s: float = 0.2
    init_points: int = 100
    deterministic: bool = True

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if not 0 <= self.lambda_dssim <= 1:
            raise ValueError("train.lambda_dssim must lie in [0, 1]")
        if self.iterations < 0:
            raise ValueError("train.iterations must be >= 0")
        if self.refine_every < 1:
            raise ValueError("train.refine_every must be >= 1")
        return self

    def refine_window(self) -> Tuple[int, int]:
        stop = self.refine_stop if self.refine_stop is not None else int(0.8 * self.iterations)
        return self.refine_start, stop


# ─── Everything together ────────────────────────────────────────────────────

class WorkbenchConfig(BaseModel):
    filter: FilterConfig = Field(default_factory=FilterConfig)
    densify: DensifyConfig = Field(default_factory=DensifyConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


def load_config(path: Optional[str] = None) -> WorkbenchConfig:
    """
    Load a WorkbenchConfig from a TOML or JSON file.

    Args:
        path: File path; None returns the defaults.

    Returns:
        Validated WorkbenchConfig.
    """
    if path is None:
        return WorkbenchConfig()

    if not os.path.exists(path):
        raise DataError(f"Config file not found: {path}")

    try:
        if path.lower().endswith(".toml"):
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        else:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        return WorkbenchConfig.model_validate(raw)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, ValueError) as e:
        raise DataError(f"Invalid config file {path}: {e}") from e
