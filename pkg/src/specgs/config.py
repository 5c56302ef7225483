"""Global configuration: one YAML file, one section per subsystem.

Every field has a default; a config file only needs the fields it changes.
Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SRGB_D65_XYZ_TO_RGB = (
    (3.2404542, -1.5371385, -0.4985314),
    (-0.9692660, 1.8760108, 0.0415560),
    (0.0556434, -0.2040259, 1.0572252),
)


@dataclass
class ColorConfig:
    gamma_mode: str = "srgb"  # "srgb" piecewise curve or "power"
    gamma: float = 2.2  # exponent used only when gamma_mode == "power"
    xyz_to_rgb: tuple = SRGB_D65_XYZ_TO_RGB


@dataclass
class SceneConfig:
    env_height: int = 64
    env_width: int = 128
    env_levels: int = 5
    share_env: bool = False


@dataclass
class ShadingConfig:
    roughness_floor: float = 0.02
    quad_theta: int = 32
    quad_phi: int = 64
    lobe: str = "reflection"  # or "half_vector" (quadrature path only)
    use_quadrature: bool = False


@dataclass
class RasterConfig:
    tile_size: int = 16
    cov2d_reg: float = 0.3
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    transmittance_min: float = 1e-4
    sigma_extent: float = 3.0
    threads: int = 1
    check_sorted: bool = False


@dataclass
class LossConfig:
    gamma: float = 0.2
    gamma_2d: float = 1.0
    gamma_3d: float = 2.0
    knn_k: int = 5
    sample_m: int = 1000
    id_alpha_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"loss.gamma must lie in [0, 1], got {self.gamma}")
        if self.gamma_2d < 0 or self.gamma_3d < 0:
            raise ValueError("loss weights must be non-negative")
        if self.knn_k < 1 or self.sample_m < 1:
            raise ValueError("loss.knn_k and loss.sample_m must be >= 1")


@dataclass
class LearningRates:
    means: float = 1.6e-4
    means_final: float = 1.6e-6
    log_scales: float = 5e-3
    rotations: float = 1e-3
    opacity_logits: float = 5e-2
    normal_params: float = 2.5e-3
    diffuse_logits: float = 2.5e-3
    specular_logits: float = 2.5e-3
    roughness_logits: float = 2.5e-3
    encodings: float = 2.5e-3
    clf_weight: float = 5e-4
    clf_bias: float = 5e-4
    env: float = 1e-2


@dataclass
class TrainConfig:
    iterations: int = 30000
    warmup_iterations: int = 1000
    use_full_prior: bool = True
    seed: int = 0
    lr: LearningRates = field(default_factory=LearningRates)
    spatial_scale: float = 1.0
    densify: bool = False
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    frozen: tuple = ()
    log_every: int = 0

    def __post_init__(self):
        if isinstance(self.lr, dict):
            self.lr = LearningRates(**self.lr)
        self.frozen = tuple(self.frozen)
        if self.iterations < 0 or self.warmup_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        for name, value in dataclasses.asdict(self.lr).items():
            if value <= 0:
                raise ValueError(f"learning rate {name} must be > 0, got {value}")


@dataclass
class EditConfig:
    iterations: int = 2000
    freeze_geometry: bool = True
    confidence_threshold: float = 0.5


@dataclass
class Config:
    color: ColorConfig = field(default_factory=ColorConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    shading: ShadingConfig = field(default_factory=ShadingConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    edit: EditConfig = field(default_factory=EditConfig)


_SECTION_TYPES = {
    "color": ColorConfig,
    "scene": SceneConfig,
    "shading": ShadingConfig,
    "raster": RasterConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "edit": EditConfig,
}


def _build(cls, values: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ValueError(f"unknown config key '{where}.{key}'")
    if cls is TrainConfig and "lr" in values:
        lr = values["lr"]
        lr_known = {f.name for f in dataclasses.fields(LearningRates)}
        for key in lr:
            if key not in lr_known:
                raise ValueError(f"unknown config key '{where}.lr.{key}'")
    return cls(**values)


def config_from_dict(data: dict[str, Any] | None) -> Config:
    data = data or {}
    sections = {}
    for name, values in data.items():
        if name not in _SECTION_TYPES:
            raise ValueError(f"unknown config section '{name}'")
        sections[name] = _build(_SECTION_TYPES[name], values or {}, name)
    return Config(**sections)


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def config_to_dict(cfg: Config) -> dict:
    out = dataclasses.asdict(cfg)
    out["color"]["xyz_to_rgb"] = [list(r) for r in cfg.color.xyz_to_rgb]
    out["train"]["frozen"] = list(cfg.train.frozen)
    return out


def override(cfg: Config, dotted: str, value) -> Config:
    """Return a copy of ``cfg`` with ``section.key`` replaced."""
    data = config_to_dict(cfg)
    section, _, key = dotted.partition(".")
    if section not in data or key not in data[section]:
        raise ValueError(f"unknown config key '{dotted}'")
    data[section][key] = value
    return config_from_dict(data)
