"""Pipeline configuration: one flat dataclass, loadable from a versioned YAML file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION

    # input conditioning
    voxel_leaf: tuple = (0.1, 0.1, 0.2)
    max_range: float | None = None

    # geometric units
    unit_size: tuple = (1.6, 1.6, 3.2)
    min_unit_points: int = 10

    # per-point covariance estimation
    knn: int = 16
    lambda_min: float = 1e-4
    lambda_max: float = 1.0
    iso_radius: float = 2.0

    # per-unit registration / association
    gate: float = 1.0
    icp_iterations: int = 8
    icp_tol_translation: float = 1e-4
    icp_tol_rotation: float = 1e-4

    # scoring and voting
    score_residual_weight: float = 4.0
    score_condition_weight: float = 0.5
    score_inlier_weight: float = 0.25
    gamma: float = 20.0
    refine_steps: int = 2
    refine_delta: float = 0.5
    refine_eval_points: int = 512
    refine_candidates: int = 4
    refine_exact: bool = False

    # whole-scan polish
    polish_iterations: int = 2

    # mapping backend
    mapping: bool = True
    map_leaf: float = 0.8
    cov_fusion: bool = True
    rep_gating: bool = True
    tau1_percentile: float = 60.0
    stale_after: int | None = None

    # ablations
    scalar_confidence: bool = False

    # execution
    threads: int = 1

    def validate(self) -> "PipelineConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if len(tuple(self.voxel_leaf)) != 3 or any(v <= 0 for v in self.voxel_leaf):
            raise ConfigError("voxel_leaf must be three positive numbers")
        if len(tuple(self.unit_size)) != 3 or any(v <= 0 for v in self.unit_size):
            raise ConfigError("unit_size must be three positive numbers")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.lambda_min > self.lambda_max:
            raise ConfigError("lambda_min must not exceed lambda_max")
        if self.knn < 4:
            raise ConfigError("knn must be at least 4")
        return self

    @staticmethod
    def load(path) -> "PipelineConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        known = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        for key in ("voxel_leaf", "unit_size"):
            if key in raw and isinstance(raw[key], list):
                raw[key] = tuple(raw[key])
        return PipelineConfig(**raw).validate()

    def save(self, path) -> None:
        data = dataclasses.asdict(self)
        data["voxel_leaf"] = list(self.voxel_leaf)
        data["unit_size"] = list(self.unit_size)
        Path(path).write_text(yaml.safe_dump(data, sort_keys=False))
