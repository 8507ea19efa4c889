"""A deliberately small single-anchor proposal head.

The fused volume is collapsed to a bird's-eye-view plane by a channelwise
max over the vertical axis. Tiny linear heads score every BEV cell and
regress a 7-slot residual against one car-sized anchor centered at the
cell; residuals decode with exponential sizes so boxes stay positive.
Greedy axis-aligned NMS with deterministic tie-breaking yields the
proposal list. This exists to give the losses and the interaction module
realistic inputs, not to be a competitive detector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .geom import Box3D, GridSpec
from .grids import DenseGrid
from .numgrad import LinearMap, Value, block_max_pool, reshape, sigmoid

CAR_ANCHOR_SIZE = (3.9, 1.6, 1.56)
ARCSIN_CLIP = 1.0 - 1e-9


@dataclass
class ProposalHead:
    """Per-cell score and residual maps over BEV features."""

    cls_map: LinearMap
    reg_map: LinearMap

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "ProposalHead":
        return cls(
            LinearMap.init(channels, 1, rng, bias=True),
            LinearMap.init(channels, 7, rng, bias=True),
        )

    def params(self) -> list[Value]:
        return self.cls_map.params() + self.reg_map.params()


@dataclass
class Proposal:
    box: Box3D
    score: float
    cell: int  # flat BEV cell index, kept so trainers can gather head rows


@dataclass
class HeadOutputs:
    """Differentiable per-cell head outputs plus the anchor layout."""

    probs: Value      # (n_cells, 1) sigmoid scores
    residuals: Value  # (n_cells, 7)
    anchor_centers: np.ndarray  # (n_cells, 3)
    grid: GridSpec


def anchor_centers_for_grid(spec: GridSpec) -> np.ndarray:
    """One anchor per BEV cell: x/y at the cell center, z at mid-height."""
    xs = spec.origin[0] + (np.arange(spec.dims[0]) + 0.5) * spec.voxel_size[0]
    ys = spec.origin[1] + (np.arange(spec.dims[1]) + 0.5) * spec.voxel_size[1]
    z_mid = spec.origin[2] + spec.dims[2] * spec.voxel_size[2] / 2.0
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z_mid)], axis=1)
    return centers


def anchor_box(center: np.ndarray) -> Box3D:
    return Box3D(center, np.array(CAR_ANCHOR_SIZE), 0.0)


def encode_box_residuals(box: Box3D, anchor_center: np.ndarray) -> np.ndarray:
    """7-slot residual of a box against the cell anchor.

    Offsets normalize by the anchor's BEV diagonal (dz by its height),
    sizes are log ratios, and the yaw slot stores sin(yaw - anchor_yaw)
    (anchors have yaw 0), which the decoder inverts with arcsin.
    """
    la, wa, ha = CAR_ANCHOR_SIZE
    diag = math.hypot(la, wa)
    res = np.empty(7)
    res[0] = (box.center[0] - anchor_center[0]) / diag
    res[1] = (box.center[1] - anchor_center[1]) / diag
    res[2] = (box.center[2] - anchor_center[2]) / ha
    res[3] = math.log(box.size[0] / la)
    res[4] = math.log(box.size[1] / wa)
    res[5] = math.log(box.size[2] / ha)
    res[6] = math.sin(box.yaw)
    return res


def decode_box_residuals(res: np.ndarray, anchor_center: np.ndarray) -> Box3D:
    la, wa, ha = CAR_ANCHOR_SIZE
    diag = math.hypot(la, wa)
    center = np.array(
        [
            anchor_center[0] + res[0] * diag,
            anchor_center[1] + res[1] * diag,
            anchor_center[2] + res[2] * ha,
        ]
    )
    # np.exp saturates to inf instead of raising, so a diverged residual
    # surfaces as the box validator's numeric failure
    size = np.array([la, wa, ha]) * np.exp(np.asarray(res[3:6], dtype=np.float64))
    yaw = math.asin(max(-ARCSIN_CLIP, min(ARCSIN_CLIP, float(res[6]))))
    return Box3D(center, size, yaw)


def bev_collapse(grid: DenseGrid) -> Value:
    """Channelwise max over the vertical axis: (X, Y, Z, C) -> (X*Y, C)."""
    pooled = block_max_pool(grid.feat, (1, 1, grid.spec.dims[2]))
    gx, gy, _, c = pooled.shape
    return reshape(pooled, (gx * gy, c))


def head_outputs(grid: DenseGrid, head: ProposalHead) -> HeadOutputs:
    bev = bev_collapse(grid)
    probs = sigmoid(head.cls_map(bev))
    residuals = head.reg_map(bev)
    return HeadOutputs(probs, residuals, anchor_centers_for_grid(grid.spec), grid.spec)


def nms_axis_aligned(
    centers: np.ndarray, sizes: np.ndarray, order: np.ndarray, iou_threshold: float
) -> list[int]:
    """Greedy suppression in the given priority order; returns kept row ids."""
    lo = centers - sizes / 2.0
    hi = centers + sizes / 2.0
    vol = sizes.prod(axis=1)
    kept: list[int] = []
    for i in order:
        ok = True
        for j in kept:
            glo = np.maximum(lo[i], lo[j])
            ghi = np.minimum(hi[i], hi[j])
            gap = np.maximum(ghi - glo, 0.0)
            inter = gap.prod()
            union = vol[i] + vol[j] - inter
            if union > 0.0 and inter / union > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(int(i))
    return kept


def propose(
    grid: DenseGrid,
    head: ProposalHead,
    top_k: int,
    nms_iou: float = 0.7,
    pre_nms: int = 512,
    outputs: HeadOutputs | None = None,
) -> list[Proposal]:
    """Decode, suppress, and rank the head's per-cell boxes.

    Candidates are ordered by descending score with ascending cell index
    as the tie-break, truncated to `pre_nms` before greedy axis-aligned
    NMS, and the top_k survivors are returned. Fully deterministic.
    """
    if top_k < 1:
        raise ContractError(f"top_k must be >= 1, got {top_k}")
    out = outputs if outputs is not None else head_outputs(grid, head)
    scores = out.probs.data[:, 0]
    res = out.residuals.data
    n = scores.shape[0]
    order = np.lexsort((np.arange(n), -scores))[: min(pre_nms, n)]

    la, wa, ha = CAR_ANCHOR_SIZE
    diag = math.hypot(la, wa)
    cand = out.anchor_centers[order].copy()
    cand[:, 0] += res[order, 0] * diag
    cand[:, 1] += res[order, 1] * diag
    cand[:, 2] += res[order, 2] * ha
    cand_sizes = np.exp(res[order, 3:6]) * np.array([la, wa, ha])

    kept = nms_axis_aligned(cand, cand_sizes, np.arange(len(order)), nms_iou)[:top_k]
    proposals = []
    for k in kept:
        cell = int(order[k])
        yaw = math.asin(max(-ARCSIN_CLIP, min(ARCSIN_CLIP, float(res[cell, 6]))))
        box = Box3D(cand[k], cand_sizes[k], yaw)
        proposals.append(Proposal(box, float(scores[cell]), cell))
    return proposals
