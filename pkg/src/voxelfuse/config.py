"""Run configuration: dataclass tree plus a flat dotted-key text format.

Files are plain `key = value` lines (# comments allowed). Vector values
are comma-separated. An optional `profile = kitti|toy|mini` line selects
the base defaults; every other key overrides one field. Unknown keys are
rejected. The default profile mirrors the full-scale detection setup
(70.4 m x 80 m x 4 m range, 5 cm LiDAR voxels, 20 cm image voxels); the
toy profile scales the lattices down for CPU-sized runs.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, VoxelFuseError
from .geom import DepthBinSpec, GridSpec
from .losses import LossWeights
from .qfm import AttentionConfig


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    beta_rpn: float = 1.0 / 9.0
    beta_refine: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 0.02
    steps: int = 200
    seed: int = 0


@dataclass
class SceneConfig:
    box_count_min: int = 1
    box_count_max: int = 5
    points_per_box: int = 256
    background_points: int = 512
    noise_sigma: float = 0.03
    yaw_range: float = 0.6
    image_width: int = 256
    image_height: int = 128
    focal: float = 96.0
    count_norm: float = 10.0
    feature_amp: float = 1.0


@dataclass
class DetectorConfig:
    top_k: int = 64
    nms_iou: float = 0.7
    pre_nms: int = 512
    rpn_pos_iou: float = 0.6


@dataclass
class VfimConfig:
    g_pool: int = 6
    n_proposals: int = 128
    pos_iou: float = 0.55
    hidden: int = 256


@dataclass
class RunConfig:
    channels: int = 16
    stride: int = 4
    lidar_grid: GridSpec = field(
        default_factory=lambda: GridSpec((0.0, -40.0, -3.0), (0.05, 0.05, 0.1), (1408, 1600, 40))
    )
    image_grid: GridSpec = field(
        default_factory=lambda: GridSpec((0.0, -40.0, -3.0), (0.2, 0.2, 0.4), (352, 400, 10))
    )
    bins: DepthBinSpec = field(default_factory=lambda: DepthBinSpec(0.0, 70.4, 80))
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    vfim: VfimConfig = field(default_factory=VfimConfig)

    def fmap_dims(self) -> tuple[int, int]:
        return self.scene.image_width // self.stride, self.scene.image_height // self.stride

    def clone(self) -> "RunConfig":
        return copy.deepcopy(self)

    def validate(self) -> None:
        """Cross-field invariants; raises ConfigError."""
        if self.channels < 5:
            raise ConfigError(
                f"channels must be >= 5 (three offsets, intensity, count), got {self.channels}"
            )
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.scene.image_width % self.stride or self.scene.image_height % self.stride:
            raise ConfigError(
                f"stride {self.stride} must divide the image size "
                f"{self.scene.image_width}x{self.scene.image_height}"
            )
        slack = 1e-9
        if np.any(self.image_grid.origin > self.lidar_grid.origin + slack) or np.any(
            self.image_grid.upper < self.lidar_grid.upper - slack
        ):
            raise ConfigError("image voxel extent must cover the LiDAR grid extent")
        if self.scene.focal <= 0:
            raise ConfigError(f"focal length must be positive, got {self.scene.focal}")
        if self.scene.box_count_min < 0 or self.scene.box_count_max < self.scene.box_count_min:
            raise ConfigError(
                f"bad box count range [{self.scene.box_count_min}, {self.scene.box_count_max}]"
            )
        if not 0.0 <= self.scene.yaw_range < math.pi / 2:
            raise ConfigError(f"yaw range must lie in [0, pi/2), got {self.scene.yaw_range}")
        if self.optim.steps < 1:
            raise ConfigError(f"step count must be >= 1, got {self.optim.steps}")
        if self.vfim.n_proposals < 1 or self.vfim.g_pool < 1:
            raise ConfigError("proposal sample size and pooling resolution must be >= 1")
        if not 0.0 <= self.vfim.pos_iou < 1.0 or not 0.0 <= self.detector.rpn_pos_iou <= 1.0:
            raise ConfigError("IoU thresholds must lie in [0, 1)")

    @classmethod
    def kitti(cls) -> "RunConfig":
        return cls()

    @classmethod
    def toy(cls) -> "RunConfig":
        """CPU-sized profile: same spatial extent, 16x coarser LiDAR cells."""
        cfg = cls(
            lidar_grid=GridSpec((0.0, -40.0, -3.0), (0.8, 0.8, 0.1), (88, 100, 40)),
            image_grid=GridSpec((0.0, -40.0, -3.0), (3.2, 3.2, 0.4), (22, 25, 10)),
            bins=DepthBinSpec(0.0, 70.4, 20),
        )
        cfg.vfim.n_proposals = 32
        cfg.vfim.g_pool = 4
        cfg.vfim.hidden = 64
        cfg.detector.top_k = 48
        return cfg

    @classmethod
    def mini(cls) -> "RunConfig":
        """Smallest useful profile, for property tests and the ablation sweep."""
        cfg = cls(
            channels=8,
            lidar_grid=GridSpec((0.0, -9.6, -3.0), (0.8, 0.8, 0.5), (24, 24, 8)),
            image_grid=GridSpec((0.0, -9.6, -3.0), (1.6, 1.6, 1.0), (12, 12, 4)),
            bins=DepthBinSpec(0.0, 20.0, 8),
        )
        cfg.attention = AttentionConfig(heads=2, d_k=16, d_v=16, pool_scale=4)
        cfg.scene.image_width = 96
        cfg.scene.image_height = 64
        cfg.scene.focal = 48.0
        cfg.scene.points_per_box = 160
        cfg.scene.background_points = 200
        cfg.scene.box_count_max = 3
        cfg.optim.steps = 25
        cfg.vfim.g_pool = 3
        cfg.vfim.n_proposals = 8
        cfg.vfim.hidden = 32
        cfg.detector.top_k = 16
        cfg.detector.pre_nms = 128
        return cfg


PROFILES = {"kitti": RunConfig.kitti, "toy": RunConfig.toy, "mini": RunConfig.mini}


def _fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in v)


def _fmt_dims(v) -> str:
    return ",".join(str(int(x)) for x in v)


def _parse_vec3(s: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected three comma-separated values, got {s!r}")
    return tuple(float(p) for p in parts)  # type: ignore[return-value]


def _parse_dims(s: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected three comma-separated ints, got {s!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


# key -> (reader, writer); readers mutate the config in place.
def _grid_keys(name: str):
    def set_origin(cfg, s):
        grid = getattr(cfg, name)
        setattr(cfg, name, GridSpec(_parse_vec3(s), grid.voxel_size, grid.dims))

    def set_size(cfg, s):
        grid = getattr(cfg, name)
        setattr(cfg, name, GridSpec(grid.origin, _parse_vec3(s), grid.dims))

    def set_dims(cfg, s):
        grid = getattr(cfg, name)
        setattr(cfg, name, GridSpec(grid.origin, grid.voxel_size, _parse_dims(s)))

    return {
        f"{name}.origin": (set_origin, lambda cfg: _fmt_vec(getattr(cfg, name).origin)),
        f"{name}.voxel_size": (set_size, lambda cfg: _fmt_vec(getattr(cfg, name).voxel_size)),
        f"{name}.dims": (set_dims, lambda cfg: _fmt_dims(getattr(cfg, name).dims)),
    }


def _scalar(path: str, kind):
    head, _, leaf = path.rpartition(".")

    def target(cfg):
        obj = cfg
        if head:
            for part in head.split("."):
                obj = getattr(obj, part)
        return obj

    def read(cfg, s):
        setattr(target(cfg), leaf, kind(s))

    def write(cfg):
        v = getattr(target(cfg), leaf)
        return repr(float(v)) if kind is float else str(int(v))

    return read, write


_KEYS: dict = {
    "channels": _scalar("channels", int),
    "stride": _scalar("stride", int),
    **_grid_keys("lidar_grid"),
    **_grid_keys("image_grid"),
    "bins.d_min": _scalar("bins.d_min", float),
    "bins.d_max": _scalar("bins.d_max", float),
    "bins.r": _scalar("bins.r", int),
    "qfm.heads": _scalar("attention.heads", int),
    "qfm.d_k": _scalar("attention.d_k", int),
    "qfm.d_v": _scalar("attention.d_v", int),
    "qfm.lambda": _scalar("attention.pool_scale", int),
    "loss.gamma_vfim": _scalar("loss.weights.gamma_vfim", float),
    "loss.omega_cls": _scalar("loss.weights.omega_cls", float),
    "loss.omega_reg": _scalar("loss.weights.omega_reg", float),
    "loss.focal_alpha": _scalar("loss.focal_alpha", float),
    "loss.focal_gamma": _scalar("loss.focal_gamma", float),
    "loss.beta_rpn": _scalar("loss.beta_rpn", float),
    "loss.beta_refine": _scalar("loss.beta_refine", float),
    "optim.lr": _scalar("optim.lr", float),
    "optim.steps": _scalar("optim.steps", int),
    "optim.seed": _scalar("optim.seed", int),
    "scene.box_count_min": _scalar("scene.box_count_min", int),
    "scene.box_count_max": _scalar("scene.box_count_max", int),
    "scene.points_per_box": _scalar("scene.points_per_box", int),
    "scene.background_points": _scalar("scene.background_points", int),
    "scene.noise_sigma": _scalar("scene.noise_sigma", float),
    "scene.yaw_range": _scalar("scene.yaw_range", float),
    "scene.image_width": _scalar("scene.image_width", int),
    "scene.image_height": _scalar("scene.image_height", int),
    "scene.focal": _scalar("scene.focal", float),
    "scene.count_norm": _scalar("scene.count_norm", float),
    "scene.feature_amp": _scalar("scene.feature_amp", float),
    "detector.top_k": _scalar("detector.top_k", int),
    "detector.nms_iou": _scalar("detector.nms_iou", float),
    "detector.pre_nms": _scalar("detector.pre_nms", int),
    "detector.rpn_pos_iou": _scalar("detector.rpn_pos_iou", float),
    "vfim.g_pool": _scalar("vfim.g_pool", int),
    "vfim.n_proposals": _scalar("vfim.n_proposals", int),
    "vfim.pos_iou": _scalar("vfim.pos_iou", float),
    "vfim.hidden": _scalar("vfim.hidden", int),
}


def parse_config_text(text: str, base_profile: str = "toy") -> RunConfig:
    overrides: list[tuple[int, str, str]] = []
    profile = base_profile
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "profile":
            if value not in PROFILES:
                raise ConfigError(f"line {lineno}: unknown profile {value!r}")
            profile = value
            continue
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        overrides.append((lineno, key, value))

    cfg = PROFILES[profile]()
    for lineno, key, value in overrides:
        reader, _ = _KEYS[key]
        try:
            reader(cfg, value)
        except ConfigError:
            raise
        except (ValueError, VoxelFuseError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def load_config(path: str | Path | None, base_profile: str = "toy") -> RunConfig:
    if path is None:
        cfg = PROFILES[base_profile]()
        cfg.validate()
        return cfg
    return parse_config_text(Path(path).read_text(), base_profile)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, (_, writer) in _KEYS.items():
        lines.append(f"{key} = {writer(cfg)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
