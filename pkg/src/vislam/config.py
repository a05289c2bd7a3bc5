"""Pipeline configuration: one structured text file (YAML, nested sections)
holding every module parameter. Unknown keys are rejected with the offending
key named, so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigError
from .fusion import FusionConfig
from .mapper import MapperConfig


@dataclass
class FrontendSettings:
    budget: int = 120
    grid_size: int = 8
    per_bin_cap: int = 4
    corner_threshold: int = 20
    lk_window: int = 21
    lk_levels: int = 3
    lk_iterations: int = 30
    lk_convergence_px: float = 0.01
    min_tracked: int = 60
    match_gate_px: float = 3.0


@dataclass
class TrackerSettings:
    max_update_iterations: int = 5
    update_tolerance: float = 1e-6
    pixel_sigma: float = 1.0
    init_attitude_sigma: float = 1e-3
    init_position_sigma: float = 1e-3
    init_velocity_sigma: float = 1e-2
    init_bias_accel_sigma: float = 1e-2
    init_bias_gyro_sigma: float = 1e-3
    max_imu_gap: float = 0.05


@dataclass
class MapperSettings:
    keyframe_angle_deg: float = 15.0
    keyframe_distance: float = 0.3
    epipolar_tol_px: float = 2.0
    ba_shared_obs: int = 20
    ba_huber_px: float = 2.0
    ba_max_iterations: int = 20
    prune_reproj_px: float = 3.0
    min_point_obs: int = 2
    min_keyframe_obs: int = 3
    keyframe_limit: int = 50
    ba_delay_s: float = 0.0  # artificial delay, used by the concurrency tests

    def to_mapper_config(self) -> MapperConfig:
        return MapperConfig(
            keyframe_angle_rad=math.radians(self.keyframe_angle_deg),
            keyframe_distance=self.keyframe_distance,
            epipolar_tol_px=self.epipolar_tol_px,
            ba_shared_obs=self.ba_shared_obs,
            ba_huber_px=self.ba_huber_px,
            ba_max_iterations=self.ba_max_iterations,
            prune_reproj_px=self.prune_reproj_px,
            min_point_obs=self.min_point_obs,
            min_keyframe_obs=self.min_keyframe_obs,
            keyframe_limit=self.keyframe_limit,
        )


@dataclass
class FusionSettings:
    process_noise_diag: list = field(default_factory=lambda: [0.01] * 3 + [0.1] * 3 + [0.01] * 3)
    slam_noise_diag: list = field(default_factory=lambda: [1e-4] * 3 + [2.5e-3] * 3 + [1e-4] * 3)
    gnss_noise_diag: list = field(default_factory=lambda: [0.25] * 3 + [0.01] * 3)
    alignment_window_s: float = 5.0
    buffer_window_s: float = 0.05

    def to_fusion_config(self, rotation_gnss_to_slam=None) -> FusionConfig:
        return FusionConfig(
            process_noise=np.diag(self.process_noise_diag),
            slam_noise=np.diag(self.slam_noise_diag),
            gnss_noise=np.diag(self.gnss_noise_diag),
            rotation_gnss_to_slam=(rotation_gnss_to_slam if rotation_gnss_to_slam
                                   is not None else np.eye(3)),
        )


@dataclass
class EvaluationSettings:
    rpe_delta: float = 1.0
    rpe_delta_unit: str = "sec"
    max_dt: float = 0.02


@dataclass
class RunSettings:
    deterministic: bool = False
    seed: int = 0
    log_level: str = "INFO"
    gravity: list = field(default_factory=lambda: [0.0, 0.0, -9.81])


@dataclass
class PipelineConfig:
    frontend: FrontendSettings = field(default_factory=FrontendSettings)
    tracker: TrackerSettings = field(default_factory=TrackerSettings)
    mapper: MapperSettings = field(default_factory=MapperSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    run: RunSettings = field(default_factory=RunSettings)

    @staticmethod
    def default() -> "PipelineConfig":
        return PipelineConfig()

    @staticmethod
    def from_dict(data) -> "PipelineConfig":
        if data is None:
            return PipelineConfig()
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping of sections")
        section_types = {
            "frontend": FrontendSettings,
            "tracker": TrackerSettings,
            "mapper": MapperSettings,
            "fusion": FusionSettings,
            "evaluation": EvaluationSettings,
            "run": RunSettings,
        }
        for key in data:
            if key not in section_types:
                raise ConfigError(f"unknown section {key!r}")
        kwargs = {name: _build_section(cls, data[name], name)
                  for name, cls in section_types.items() if name in data}
        return PipelineConfig(**kwargs)

    @staticmethod
    def load(path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                doc = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return PipelineConfig.from_dict(doc)


def _build_section(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc
