"""Camera-LiDAR voxel fusion: depth-binned image lifting, attention-based
feature fusion, and paired-RoI interaction, on a NumPy autodiff core."""

from .config import RunConfig, load_config, save_config
from .errors import (
    CalibParseError,
    ConfigError,
    ContractError,
    DegenerateVectorError,
    NumericError,
    ShapeError,
    VoxelFuseError,
)
from .geom import Box3D, Calibration, DepthBinSpec, GridSpec, iou_3d
from .grids import DenseGrid
from .ivlm import build_frustum, build_lift_plan, depth_bins_from_points, lift
from .numgrad import LinearMap, Value, grad_check
from .qfm import AttentionConfig, QfmParams, concat_restore, fuse, pool_and_flatten, select_nonempty
from .scene import SyntheticScene, gen_scene, voxelize_points
from .train import run_ablation, train_demo
from .vfim import InteractionHeads, interaction_loss, voxel_roi_pool
from .vxf import read_vxf, write_vxf

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "Box3D",
    "CalibParseError",
    "Calibration",
    "ConfigError",
    "ContractError",
    "DegenerateVectorError",
    "DenseGrid",
    "DepthBinSpec",
    "GridSpec",
    "InteractionHeads",
    "LinearMap",
    "NumericError",
    "QfmParams",
    "RunConfig",
    "ShapeError",
    "SyntheticScene",
    "Value",
    "VoxelFuseError",
    "build_frustum",
    "build_lift_plan",
    "concat_restore",
    "depth_bins_from_points",
    "fuse",
    "gen_scene",
    "grad_check",
    "interaction_loss",
    "iou_3d",
    "lift",
    "load_config",
    "pool_and_flatten",
    "read_vxf",
    "run_ablation",
    "save_config",
    "select_nonempty",
    "train_demo",
    "voxel_roi_pool",
    "voxelize_points",
    "write_vxf",
]
