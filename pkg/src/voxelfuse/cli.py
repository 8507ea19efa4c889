"""Command-line entry points.

Exit codes: 0 on success, 2 for configuration/validation problems (bad
config keys, malformed calibration or tensor files, shape mismatches,
missing paths), 3 for numeric failures (divergence, non-finite values).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, save_config
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .gradsuite import TOL, run_grad_suite
from .grids import DenseGrid
from .ivlm import ImageFeatureMap, build_frustum, depth_bins_from_points, lift
from .kitti import parse_kitti_calib
from .numgrad import Value
from .qfm import (
    QfmParams,
    concat_restore,
    fuse,
    load_params_bundle,
    pool_and_flatten,
    save_params_bundle,
    select_nonempty,
)
from .scene import gen_scene, read_points_csv, write_scene
from .train import train_demo
from .vxf import read_vxf, write_vxf


def _cmd_gen_scene(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.optim.seed if args.seed is None else args.seed
    scene = gen_scene(cfg, seed)
    out = Path(args.out)
    write_scene(scene, out)
    write_vxf(out / "features.vxf", scene.image_features)
    print(f"scene with {len(scene.boxes)} boxes and {scene.points.shape[0]} points -> {out}")
    return 0


def _cmd_lift(args) -> int:
    cfg = load_config(args.config)
    calib = parse_kitti_calib(args.calib)
    feats = read_vxf(args.features)
    if feats.ndim != 3:
        raise ShapeError(f"feature map must be rank 3 (W, H, C), got rank {feats.ndim}")
    points, _ = read_points_csv(args.points)
    fdims = (feats.shape[0], feats.shape[1])
    depth = depth_bins_from_points(points, calib, fdims, cfg.bins, cfg.stride)
    frustum = build_frustum(ImageFeatureMap(Value(feats), cfg.stride), depth)
    grid = lift(frustum, calib, cfg.image_grid)
    write_vxf(args.out, grid.feat.data)
    nonzero = int(np.count_nonzero(np.any(grid.feat.data != 0.0, axis=3)))
    print(f"lifted {feats.shape} features into {grid.feat.data.shape} ({nonzero} occupied) -> {args.out}")
    return 0


def _cmd_fuse(args) -> int:
    cfg = load_config(args.config)
    lidar_feat = read_vxf(args.lidar)
    image_feat = read_vxf(args.image)
    if lidar_feat.ndim != 4 or image_feat.ndim != 4:
        raise ShapeError("voxel tensors must be rank 4 (X, Y, Z, C)")
    if tuple(lidar_feat.shape[:3]) != tuple(cfg.lidar_grid.dims):
        raise ShapeError(
            f"LiDAR tensor {lidar_feat.shape[:3]} does not match configured grid "
            f"{tuple(cfg.lidar_grid.dims)}"
        )
    channels = lidar_feat.shape[3]
    if args.params:
        params = load_params_bundle(args.params, channels, cfg.attention)
    else:
        params = QfmParams.init(channels, cfg.attention, np.random.default_rng(args.seed or 0))
    lidar = DenseGrid(cfg.lidar_grid, Value(lidar_feat))
    image_spec = cfg.image_grid
    if tuple(image_feat.shape[:3]) != tuple(image_spec.dims):
        raise ShapeError(
            f"image tensor {image_feat.shape[:3]} does not match configured grid "
            f"{tuple(image_spec.dims)}"
        )
    image = DenseGrid(image_spec, Value(image_feat))
    voxels = select_nonempty(lidar)
    bank = pool_and_flatten(image, cfg.attention.pool_scale)
    fused = fuse(voxels.features, bank, params, cfg.attention)
    merged = concat_restore(fused, voxels)
    write_vxf(args.out, merged.feat.data)
    print(f"fused {voxels.count} voxel queries -> {args.out}")
    return 0


def _cmd_train_demo(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.optim.seed = args.seed
    result = train_demo(cfg, args.out)
    if args.out:
        save_config(cfg, Path(args.out) / "config.txt")
        save_params_bundle(result.params.qfm, Path(args.out) / "qfm_params")
    print(
        f"trained {cfg.optim.steps} steps (seed {cfg.optim.seed}): "
        f"L_total {result.initial_total:.4f} -> {result.final_total:.4f}"
    )
    return 0


def _cmd_check_grads(args) -> int:
    entries = run_grad_suite(n_seeds=args.seeds)
    width = max(len(e.name) for e in entries)
    failed = 0
    for e in entries:
        status = "ok" if e.ok else "FAIL"
        print(f"{e.name:<{width}}  max rel err {e.max_err:.3e}  {status}")
        failed += not e.ok
    if failed:
        raise NumericError(f"{failed} gradient case(s) above tolerance {TOL}")
    print(f"all {len(entries)} cases within {TOL}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelfuse", description="camera-LiDAR voxel fusion pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene")
    p.add_argument("--config", default=None, help="config file (default: toy profile)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_gen_scene)

    p = sub.add_parser("lift", help="lift image features into a voxel grid")
    p.add_argument("--config", default=None)
    p.add_argument("--calib", required=True, help="calibration file (KITTI text layout)")
    p.add_argument("--features", required=True, help="feature map tensor (.vxf, W x H x C)")
    p.add_argument("--points", required=True, help="points CSV (x,y,z[,intensity])")
    p.add_argument("--out", required=True, help="output tensor (.vxf)")
    p.set_defaults(fn=_cmd_lift)

    p = sub.add_parser("fuse", help="attention-fuse LiDAR and image voxel tensors")
    p.add_argument("--config", default=None)
    p.add_argument("--lidar", required=True, help="LiDAR voxel tensor (.vxf)")
    p.add_argument("--image", required=True, help="image voxel tensor (.vxf)")
    p.add_argument("--params", default=None, help="projection bundle directory")
    p.add_argument("--seed", type=int, default=None, help="init seed when no bundle is given")
    p.add_argument("--out", required=True, help="output tensor (.vxf)")
    p.set_defaults(fn=_cmd_fuse)

    p = sub.add_parser("train-demo", help="train on synthetic scenes")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None, help="override optim.seed")
    p.add_argument("--out", default=None, help="directory for losses.csv and final params")
    p.set_defaults(fn=_cmd_train_demo)

    p = sub.add_parser("check-grads", help="run the finite-difference verification suite")
    p.add_argument("--seeds", type=int, default=20, help="seeds per case")
    p.set_defaults(fn=_cmd_check_grads)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
