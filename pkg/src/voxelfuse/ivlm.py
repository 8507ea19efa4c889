"""Image-to-voxel lifting.

A 2-D feature map is expanded into a camera frustum by taking, at every
pixel, the outer product of its feature vector with a one-hot depth-bin
vector derived from projected LiDAR points. Voxel centers of a 3-D lattice
are then projected back into the frustum and read out by trilinear
interpolation, a sparse linear gather: each voxel reads from at most the 8
enclosing frustum cells, so the whole lift is differentiable and linear in
the frustum contents. Voxels that land behind the camera or outside the
image get a zero feature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .geom import (
    Calibration,
    DepthBinSpec,
    GridSpec,
    depth_to_onehot,
    lid_bin_index,
    lid_edges,
    project_points,
    trilinear_corners,
    voxel_centers,
)
from .grids import DenseGrid
from .numgrad import Value, pixelwise_outer, reshape, weighted_gather


@dataclass
class ImageFeatureMap:
    """A (W, H, C) feature plane at a fixed pixel stride."""

    data: Value
    stride: int = 1

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ShapeError(f"feature map must be (W, H, C), got shape {self.data.shape}")
        self.stride = int(self.stride)
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")


@dataclass
class DepthBinField:
    """Per-pixel one-hot depth-bin occupancy, shape (W, H, R)."""

    data: np.ndarray
    spec: DepthBinSpec

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != self.spec.r:
            raise ShapeError(
                f"depth field of shape {self.data.shape} does not match {self.spec.r} bins"
            )


@dataclass
class FrustumTensor:
    """The lifted (W, H, R, C) frustum volume."""

    data: Value
    bin_spec: DepthBinSpec
    stride: int = 1

    def __post_init__(self) -> None:
        if self.data.ndim != 4 or self.data.shape[2] != self.bin_spec.r:
            raise ShapeError(
                f"frustum of shape {self.data.shape} does not match {self.bin_spec.r} bins"
            )


def depth_bins_from_points(
    points: np.ndarray,
    calib: Calibration,
    fmap_dims: tuple[int, int],
    bin_spec: DepthBinSpec,
    stride: int = 1,
) -> DepthBinField:
    """Project points onto the feature-map pixel grid and bin the nearest
    (minimum-depth) hit per pixel; pixels with no hit stay all-zero."""
    w_f, h_f = int(fmap_dims[0]), int(fmap_dims[1])
    out = np.zeros((w_f, h_f, bin_spec.r), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return DepthBinField(out, bin_spec)
    u, v, depth, in_front = project_points(calib, pts)
    px = np.floor(u / stride).astype(np.int64)
    py = np.floor(v / stride).astype(np.int64)
    ok = in_front & (px >= 0) & (px < w_f) & (py >= 0) & (py < h_f)
    if not np.any(ok):
        return DepthBinField(out, bin_spec)
    flat = px[ok] * h_f + py[ok]
    best = np.full(w_f * h_f, np.inf)
    np.minimum.at(best, flat, depth[ok])
    for cell in np.unique(flat):
        out[cell // h_f, cell % h_f] = depth_to_onehot(best[cell], bin_spec)
    return DepthBinField(out, bin_spec)


def build_frustum(fmap: ImageFeatureMap, depth_field: DepthBinField) -> FrustumTensor:
    """Per-pixel outer product of features with depth one-hots.

    The result places each pixel's feature vector at its occupied depth
    bin; pixels whose depth row is all-zero yield an all-zero slab, so no
    feature is fabricated where there is no depth evidence.
    """
    if fmap.data.shape[:2] != depth_field.data.shape[:2]:
        raise ShapeError(
            f"pixel grids differ: features {fmap.data.shape} vs depth {depth_field.data.shape}"
        )
    lifted = pixelwise_outer(fmap.data, depth_field.data)
    return FrustumTensor(lifted, depth_field.spec, fmap.stride)


@dataclass
class LiftPlan:
    """Precomputed gather from frustum cells to voxels.

    indices/weights are (n_voxels, 8); entries for dropped corners carry
    weight zero. raw_weight_sums records the unmasked trilinear weight sum
    (1 for every in-view voxel). The plan depends only on the calibration
    and lattice geometry, so it can be reused across scenes.
    """

    indices: np.ndarray
    weights: np.ndarray
    in_view: np.ndarray
    raw_weight_sums: np.ndarray
    fmap_dims: tuple[int, int]
    n_bins: int

    @property
    def n_cells(self) -> int:
        return self.fmap_dims[0] * self.fmap_dims[1] * self.n_bins


def build_lift_plan(
    calib: Calibration,
    voxel_grid: GridSpec,
    fmap_dims: tuple[int, int],
    bin_spec: DepthBinSpec,
    stride: int = 1,
) -> LiftPlan:
    """Project every voxel center into the frustum lattice and record its
    trilinear gather coefficients."""
    w_f, h_f = int(fmap_dims[0]), int(fmap_dims[1])
    centers = voxel_centers(voxel_grid, voxel_grid.all_indices())
    u, v, depth, in_front = project_points(calib, centers)
    dims = (w_f, h_f, bin_spec.r)
    query = np.stack(
        [
            np.where(in_front, u / stride, -1e9),
            np.where(in_front, v / stride, -1e9),
            lid_bin_index(np.where(in_front, depth, bin_spec.d_min - 1.0), bin_spec),
        ],
        axis=1,
    )
    corner_idx, weights, corner_valid, in_range = trilinear_corners(query, dims)
    in_view = in_front & in_range
    flat_idx = (
        corner_idx[:, :, 0] * (h_f * bin_spec.r)
        + corner_idx[:, :, 1] * bin_spec.r
        + corner_idx[:, :, 2]
    )
    eff_weights = weights * corner_valid * in_view[:, None]
    raw_sums = np.where(in_view, weights.sum(axis=1), 0.0)
    return LiftPlan(flat_idx, eff_weights, in_view, raw_sums, (w_f, h_f), bin_spec.r)


def lift(
    frustum: FrustumTensor,
    calib: Calibration,
    voxel_grid: GridSpec,
    plan: LiftPlan | None = None,
) -> DenseGrid:
    """Resample the frustum onto a voxel lattice.

    Linear in the frustum contents; gradients flow back through the gather
    into the image features. Pass a cached plan when lifting many frustums
    through the same calibration and lattice.
    """
    w_f, h_f, r, c = frustum.data.shape
    if plan is None:
        plan = build_lift_plan(calib, voxel_grid, (w_f, h_f), frustum.bin_spec, frustum.stride)
    if plan.fmap_dims != (w_f, h_f) or plan.n_bins != r:
        raise ShapeError(
            f"lift plan built for {plan.fmap_dims}+{plan.n_bins} bins, frustum is {frustum.data.shape}"
        )
    cells = reshape(frustum.data, (w_f * h_f * r, c))
    gathered = weighted_gather(cells, plan.indices, plan.weights)
    feat = reshape(gathered, (*voxel_grid.dims, c))
    return DenseGrid(voxel_grid, feat)


def frustum_depth_marginal(frustum: FrustumTensor) -> np.ndarray:
    """Sum over the depth axis, collapsing the frustum back to a feature
    map; equals the input features wherever a depth bin was occupied."""
    return frustum.data.data.sum(axis=2)


__all__ = [
    "ImageFeatureMap",
    "DepthBinField",
    "FrustumTensor",
    "LiftPlan",
    "depth_bins_from_points",
    "build_frustum",
    "build_lift_plan",
    "lift",
    "frustum_depth_marginal",
    "lid_edges",
]
