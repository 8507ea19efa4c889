"""Shared geometry: voxel lattices, pinhole projection, depth binning,
trilinear resampling, and rotated-box IoU.

Everything here is plain numpy (no autodiff); the differentiable modules
build gather plans from these routines. Conventions: grids are indexed
(ix, iy, iz) with cell centers at origin + (idx + 0.5) * voxel_size;
projection maps a 3-D point through a 3x4 matrix to (u, v, depth) where
depth is the camera-frame forward coordinate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon

from .errors import ContractError, NumericError, ShapeError

BEHIND_EPS = 1e-6


def _vec3(x, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.shape != (3,):
        raise ShapeError(f"expected a 3-vector, got shape {arr.shape}")
    return arr


@dataclass
class GridSpec:
    """A dense axis-aligned voxel lattice."""

    origin: np.ndarray
    voxel_size: np.ndarray
    dims: tuple[int, int, int]

    def __post_init__(self) -> None:
        self.origin = _vec3(self.origin)
        self.voxel_size = _vec3(self.voxel_size)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ContractError(f"grid dims must be three positive ints, got {self.dims}")
        if np.any(self.voxel_size <= 0) or not np.all(np.isfinite(self.voxel_size)):
            raise ContractError(f"voxel sizes must be positive and finite, got {self.voxel_size}")
        if not np.all(np.isfinite(self.origin)):
            raise ContractError(f"grid origin must be finite, got {self.origin}")

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> np.ndarray:
        return self.voxel_size * np.asarray(self.dims, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.extent

    def all_indices(self) -> np.ndarray:
        """All (ix, iy, iz) triples in lexicographic order, shape (n_cells, 3)."""
        ix, iy, iz = np.meshgrid(
            np.arange(self.dims[0]), np.arange(self.dims[1]), np.arange(self.dims[2]),
            indexing="ij",
        )
        return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)


def voxel_center(spec: GridSpec, idx) -> np.ndarray:
    """World-space center of one cell; raises IndexError outside the lattice."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (3,):
        raise ShapeError(f"voxel index must be a 3-tuple, got shape {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= np.asarray(spec.dims)):
        raise IndexError(f"voxel index {tuple(idx)} outside grid dims {spec.dims}")
    return spec.origin + (idx + 0.5) * spec.voxel_size


def voxel_centers(spec: GridSpec, idx: np.ndarray) -> np.ndarray:
    """Vectorized cell centers for an (n, 3) index array (no range check)."""
    idx = np.asarray(idx, dtype=np.float64)
    return spec.origin[None, :] + (idx + 0.5) * spec.voxel_size[None, :]


@dataclass
class Calibration:
    """A 3x4 projection matrix from world (LiDAR) space to the image plane."""

    projection: np.ndarray

    def __post_init__(self) -> None:
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.shape != (3, 4):
            raise ShapeError(f"projection must be 3x4, got shape {self.projection.shape}")
        if not np.all(np.isfinite(self.projection)):
            raise NumericError("projection matrix must be finite")


def project(calib: Calibration, point) -> tuple[float, float, float] | None:
    """Project one point to (u, v, depth); None when at or behind the camera."""
    p = _vec3(point)
    if not np.all(np.isfinite(p)):
        raise NumericError(f"cannot project non-finite point {p}")
    h = calib.projection @ np.append(p, 1.0)
    depth = float(h[2])
    if depth <= BEHIND_EPS:
        return None
    return float(h[0] / depth), float(h[1] / depth), depth


def project_points(calib: Calibration, points: np.ndarray):
    """Vectorized projection: returns (u, v, depth, in_front) arrays.

    u and v are meaningful only where in_front holds.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must be (n, 3), got shape {pts.shape}")
    h = pts @ calib.projection[:, :3].T + calib.projection[:, 3][None, :]
    depth = h[:, 2]
    in_front = depth > BEHIND_EPS
    safe = np.where(in_front, depth, 1.0)
    return h[:, 0] / safe, h[:, 1] / safe, depth, in_front


def unproject(calib: Calibration, u: float, v: float, depth: float) -> np.ndarray:
    """Algebraic inverse of project for a known depth."""
    a = calib.projection[:, :3]
    b = calib.projection[:, 3]
    rhs = depth * np.array([u, v, 1.0]) - b
    return np.linalg.solve(a, rhs)


def compose_projection(p_cam: np.ndarray, rect: np.ndarray, velo_to_cam: np.ndarray) -> np.ndarray:
    """Compose camera intrinsics, rectification, and the LiDAR->camera
    transform into one 3x4 world->image matrix."""
    p_cam = np.asarray(p_cam, dtype=np.float64)
    rect = np.asarray(rect, dtype=np.float64)
    velo_to_cam = np.asarray(velo_to_cam, dtype=np.float64)
    if p_cam.shape != (3, 4) or rect.shape != (3, 3) or velo_to_cam.shape != (3, 4):
        raise ShapeError(
            f"expected shapes (3,4), (3,3), (3,4); got {p_cam.shape}, {rect.shape}, {velo_to_cam.shape}"
        )
    rect4 = np.eye(4)
    rect4[:3, :3] = rect
    tr4 = np.eye(4)
    tr4[:3, :] = velo_to_cam
    return (p_cam @ rect4 @ tr4)[:3, :]


# ---------------------------------------------------------------------------
# depth binning


@dataclass
class DepthBinSpec:
    """Discretization of the depth axis into bins whose width grows linearly."""

    d_min: float
    d_max: float
    r: int

    def __post_init__(self) -> None:
        self.d_min = float(self.d_min)
        self.d_max = float(self.d_max)
        self.r = int(self.r)
        if not (math.isfinite(self.d_min) and math.isfinite(self.d_max)):
            raise ContractError("depth range must be finite")
        if self.d_max <= self.d_min:
            raise ContractError(f"d_max ({self.d_max}) must exceed d_min ({self.d_min})")
        if self.r < 1:
            raise ContractError(f"bin count must be >= 1, got {self.r}")


def lid_edges(spec: DepthBinSpec) -> np.ndarray:
    """Bin edges with linearly increasing widths: r+1 strictly increasing
    values whose endpoints equal d_min and d_max exactly.

    edge[i] sits at the fraction i*(i+1) / (r*(r+1)) of the depth range;
    consecutive widths grow by a constant step. Computed in lerp form so
    both endpoints are exact in f64.
    """
    r = spec.r
    i = np.arange(r + 1, dtype=np.float64)
    t = (i * (i + 1.0)) / (r * (r + 1.0))
    return spec.d_min * (1.0 - t) + spec.d_max * t


def depth_to_onehot(depth: float, spec: DepthBinSpec) -> np.ndarray:
    """One-hot bin membership; half-open bins, last edge inclusive,
    out-of-range depths give the all-zero vector."""
    depth = float(depth)
    if not math.isfinite(depth):
        raise NumericError(f"depth must be finite, got {depth}")
    out = np.zeros(spec.r, dtype=np.float64)
    edges = lid_edges(spec)
    if depth < edges[0] or depth > edges[-1]:
        return out
    if depth == edges[-1]:
        out[spec.r - 1] = 1.0
        return out
    i = int(np.searchsorted(edges, depth, side="right")) - 1
    out[i] = 1.0
    return out


def lid_bin_index(depth: np.ndarray, spec: DepthBinSpec) -> np.ndarray:
    """Continuous bin coordinate: integer part is the bin, fractional part
    the position within it. Out-of-range depths map far outside [0, r)."""
    d = np.asarray(depth, dtype=np.float64)
    edges = lid_edges(spec)
    i = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, spec.r - 1)
    frac = (d - edges[i]) / (edges[i + 1] - edges[i])
    idx = i + frac
    return np.where((d >= edges[0]) & (d <= edges[-1]), idx, -1e9)


# ---------------------------------------------------------------------------
# trilinear resampling


def trilinear_corners(query: np.ndarray, dims: tuple[int, int, int]):
    """Gather plan for trilinear interpolation at continuous lattice coords.

    query is (n, 3) with lattice nodes at integer positions. Returns
    (corner_idx, weights, corner_valid, in_range):

      corner_idx    (n, 8, 3) nearest-corner indices, clipped into range
      weights       (n, 8)    trilinear weights, sum to 1 per query
      corner_valid  (n, 8)    whether the corner exists in the lattice
      in_range      (n,)      query within [-0.5, dim - 0.5] on every axis

    A query outside the sampling range, or an out-of-lattice corner, must
    contribute a zero feature; weights themselves are never renormalized.
    """
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 3:
        raise ShapeError(f"query must be (n, 3), got shape {q.shape}")
    if np.any(np.isnan(q)):
        raise NumericError("trilinear query contains NaN")
    dims_arr = np.asarray(dims, dtype=np.int64)
    # Clip before flooring so infinite queries (always out of range) do not
    # overflow the integer cast; their weights are never used.
    q_safe = np.clip(q, -2.0**40, 2.0**40)
    base = np.floor(q_safe).astype(np.int64)
    frac = q_safe - base
    offsets = np.array(
        [[ox, oy, oz] for ox in (0, 1) for oy in (0, 1) for oz in (0, 1)], dtype=np.int64
    )
    corners = base[:, None, :] + offsets[None, :, :]  # (n, 8, 3)
    axis_w = np.where(offsets[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weights = axis_w.prod(axis=2)
    corner_valid = np.all((corners >= 0) & (corners < dims_arr[None, None, :]), axis=2)
    in_range = np.all((q >= -0.5) & (q <= dims_arr[None, :] - 0.5), axis=1)
    corner_idx = np.clip(corners, 0, dims_arr[None, None, :] - 1)
    return corner_idx, weights, corner_valid, in_range


def trilinear_sample(grid: np.ndarray, query) -> np.ndarray:
    """Sample a (D0, D1, D2, C) lattice at one continuous coordinate.

    Weighted sum over the 8 enclosing corners; out-of-lattice corners
    contribute a zero feature with their weight retained, and a query
    outside [-0.5, dim - 0.5] on any axis returns the zero vector.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 4:
        raise ShapeError(f"grid must be 4-D (three lattice axes + channels), got {grid.shape}")
    q = np.asarray(query, dtype=np.float64).reshape(1, 3)
    corner_idx, weights, corner_valid, in_range = trilinear_corners(q, grid.shape[:3])
    if not in_range[0]:
        return np.zeros(grid.shape[3], dtype=np.float64)
    w = weights[0] * corner_valid[0]
    feats = grid[corner_idx[0, :, 0], corner_idx[0, :, 1], corner_idx[0, :, 2]]
    return np.einsum("kc,k->c", feats, w)


# ---------------------------------------------------------------------------
# oriented boxes


def _wrap_angle(yaw: float) -> float:
    """Wrap into (-pi, pi]."""
    return math.pi - (math.pi - yaw) % math.tau


@dataclass
class Box3D:
    """An upright oriented box: center, (l, w, h) size, yaw about +z."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self) -> None:
        self.center = _vec3(self.center)
        self.size = _vec3(self.size)
        # non-finite geometry is a numeric failure (overflow upstream),
        # a nonpositive size is a caller bug
        if not np.all(np.isfinite(self.size)) or not np.all(np.isfinite(self.center)) or not math.isfinite(self.yaw):
            raise NumericError(f"box geometry must be finite, got size {self.size}")
        if np.any(self.size <= 0):
            raise ContractError(f"box size must be positive, got {self.size}")
        self.yaw = _wrap_angle(float(self.yaw))

    @property
    def volume(self) -> float:
        return float(self.size.prod())

    def bev_corners(self) -> np.ndarray:
        """The four footprint corners in the ground plane, CCW."""
        l, w = self.size[0], self.size[1]
        local = np.array(
            [[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]]
        )
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[None, :2]

    def z_interval(self) -> tuple[float, float]:
        half = self.size[2] / 2.0
        return float(self.center[2] - half), float(self.center[2] + half)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the box (boundary inclusive)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rel = pts - self.center[None, :]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local_x = rel[:, 0] * c + rel[:, 1] * s
        local_y = -rel[:, 0] * s + rel[:, 1] * c
        half = self.size / 2.0
        return (
            (np.abs(local_x) <= half[0])
            & (np.abs(local_y) <= half[1])
            & (np.abs(rel[:, 2]) <= half[2])
        )


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Exact IoU of two upright oriented boxes: footprint polygon clipping
    times vertical interval overlap, over the volume union."""
    poly_a = Polygon(a.bev_corners())
    poly_b = Polygon(b.bev_corners())
    inter_area = poly_a.intersection(poly_b).area
    if inter_area <= 0.0:
        return 0.0
    za0, za1 = a.z_interval()
    zb0, zb1 = b.z_interval()
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter = inter_area * dz
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_3d_axis_aligned(a: Box3D, b: Box3D) -> float:
    """IoU of the boxes with yaw ignored (axis-aligned extents)."""
    half_a, half_b = a.size / 2.0, b.size / 2.0
    lo = np.maximum(a.center - half_a, b.center - half_b)
    hi = np.minimum(a.center + half_a, b.center + half_b)
    gap = np.maximum(hi - lo, 0.0)
    inter = float(gap.prod())
    union = a.volume + b.volume - inter
    return inter / union if union > 0.0 else 0.0
