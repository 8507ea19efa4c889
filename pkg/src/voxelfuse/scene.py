"""Synthetic scenes: boxes, surface point clouds, and image feature maps.

Each scene is fully determined by (config, seed). Points are sampled on
box surfaces with Gaussian jitter plus a ground sheet; the image feature
map is background noise with a per-box signature stamped at the pixels
the box's points project to, so the camera stream genuinely carries
object evidence for the fusion stages to pick up.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .geom import Box3D, Calibration, GridSpec, project_points
from .grids import DenseGrid
from .numgrad import Value

CAR_SIZE = np.array([3.9, 1.6, 1.56])


@dataclass
class SyntheticScene:
    seed: object
    points: np.ndarray        # (n, 3) world xyz
    intensities: np.ndarray   # (n,)
    boxes: list[Box3D]
    image_features: np.ndarray  # (w_f, h_f, c)
    calib: Calibration


def make_calibration(scene_cfg) -> Calibration:
    """Forward-facing pinhole at the origin: +x optical axis, +y left, +z up."""
    f = float(scene_cfg.focal)
    cx = scene_cfg.image_width / 2.0
    cy = scene_cfg.image_height / 2.0
    p = np.array(
        [
            [cx, -f, 0.0, 0.0],
            [cy, 0.0, -f, 0.0],
            [1.0, 0.0, 0.0, 0.0],
        ]
    )
    return Calibration(p)


def _sample_box_surface(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * box.size
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 0.5, -0.5)
    local[np.arange(n), axis] = sign * box.size[axis]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def _draw_box(cfg, rng: np.random.Generator) -> Box3D:
    grid = cfg.lidar_grid
    extent = grid.extent
    size = CAR_SIZE * rng.uniform(0.85, 1.25, size=3)
    half_diag = 0.5 * float(np.hypot(size[0], size[1]))
    x = grid.origin[0] + rng.uniform(0.15, 0.75) * extent[0]
    # keep the box inside the camera cone and the grid footprint
    cone = 0.8 * x * (cfg.scene.image_width / 2.0) / cfg.scene.focal
    y_lim = min(cone, grid.upper[1] - half_diag, -(grid.origin[1] + half_diag))
    y = rng.uniform(-1.0, 1.0) * max(y_lim, 0.0)
    z = grid.origin[2] + rng.uniform(0.3, 0.6) * extent[2]
    yaw = rng.uniform(-cfg.scene.yaw_range, cfg.scene.yaw_range)
    return Box3D(np.array([x, y, z]), size, yaw)


def gen_scene(cfg, seed) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    scfg = cfg.scene
    calib = make_calibration(scfg)
    w_f, h_f = cfg.fmap_dims()

    n_boxes = int(rng.integers(scfg.box_count_min, scfg.box_count_max + 1))
    boxes = [_draw_box(cfg, rng) for _ in range(n_boxes)]

    chunks: list[np.ndarray] = []
    box_points: list[np.ndarray] = []
    for box in boxes:
        for _ in range(200):
            pts = _sample_box_surface(box, scfg.points_per_box, rng)
            pts = pts + rng.normal(0.0, scfg.noise_sigma, size=pts.shape)
            if box.contains(pts).any():
                break
        else:
            raise ContractError("failed to sample a point inside a scene box")
        chunks.append(pts)
        box_points.append(pts)

    ground_z = cfg.lidar_grid.origin[2] + 0.25 * cfg.lidar_grid.extent[2]
    ground = np.column_stack(
        [
            rng.uniform(cfg.lidar_grid.origin[0], cfg.lidar_grid.upper[0], scfg.background_points),
            rng.uniform(cfg.lidar_grid.origin[1], cfg.lidar_grid.upper[1], scfg.background_points),
            ground_z + rng.normal(0.0, scfg.noise_sigma, scfg.background_points),
        ]
    )
    chunks.append(ground)
    points = np.concatenate(chunks, axis=0)
    intensities = rng.uniform(0.3, 1.0, size=points.shape[0])

    feats = rng.normal(0.0, 0.02 * scfg.feature_amp, size=(w_f, h_f, cfg.channels))
    for pts in box_points:
        signature = rng.normal(0.0, scfg.feature_amp, size=cfg.channels)
        u, v, _, ok = project_points(calib, pts)
        px = np.floor(u[ok] / cfg.stride).astype(np.int64)
        py = np.floor(v[ok] / cfg.stride).astype(np.int64)
        keep = (px >= 0) & (px < w_f) & (py >= 0) & (py < h_f)
        np.add.at(feats, (px[keep], py[keep]), signature)

    return SyntheticScene(seed, points, intensities, boxes, feats, calib)


def voxelize_points(
    points: np.ndarray,
    intensities: np.ndarray,
    grid: GridSpec,
    channels: int,
    count_norm: float = 10.0,
) -> DenseGrid:
    """Per-voxel stats: mean offset from voxel center (3), mean intensity,
    count / count_norm; remaining channels zero. Out-of-grid points drop."""
    points = np.asarray(points, dtype=np.float64)
    intensities = np.asarray(intensities, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractError(f"points must be (n, 3), got {points.shape}")
    if intensities.shape != (points.shape[0],):
        raise ContractError(
            f"intensities must be ({points.shape[0]},), got {intensities.shape}"
        )
    if channels < 5:
        raise ContractError(f"need at least 5 stat channels, got {channels}")

    idx = np.floor((points - grid.origin) / grid.voxel_size).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < grid.dims), axis=1)
    idx = idx[ok]
    pts = points[ok]
    inst = intensities[ok]

    n_cells = grid.n_cells
    flat = (idx[:, 0] * grid.dims[1] + idx[:, 1]) * grid.dims[2] + idx[:, 2]
    counts = np.bincount(flat, minlength=n_cells).astype(np.float64)
    centers = grid.origin + (idx + 0.5) * grid.voxel_size
    offsets = pts - centers

    feat = np.zeros((n_cells, channels))
    for axis in range(3):
        acc = np.zeros(n_cells)
        np.add.at(acc, flat, offsets[:, axis])
        feat[:, axis] = np.divide(acc, counts, out=np.zeros(n_cells), where=counts > 0)
    acc = np.zeros(n_cells)
    np.add.at(acc, flat, inst)
    feat[:, 3] = np.divide(acc, counts, out=np.zeros(n_cells), where=counts > 0)
    feat[:, 4] = counts / count_norm

    return DenseGrid(grid, Value(feat.reshape(*grid.dims, channels)))


def write_scene(scene: SyntheticScene, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "seed": scene.seed if isinstance(scene.seed, int) else list(np.atleast_1d(scene.seed)),
        "calib": scene.calib.projection.tolist(),
        "boxes": [
            {"center": b.center.tolist(), "size": b.size.tolist(), "yaw": b.yaw}
            for b in scene.boxes
        ],
    }
    (out / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    rows = np.column_stack([scene.points, scene.intensities])
    header = "x,y,z,intensity"
    np.savetxt(out / "points.csv", rows, delimiter=",", header=header, comments="")


def read_points_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Reads x,y,z[,intensity] CSV; missing intensity defaults to 1."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] not in (3, 4):
        raise ContractError(f"points CSV must have 3 or 4 columns, got {data.shape[1]}")
    pts = data[:, :3]
    inst = data[:, 3] if data.shape[1] == 4 else np.ones(data.shape[0])
    return pts, inst
