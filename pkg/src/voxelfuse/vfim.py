"""Object-level feature interaction across modalities.

Proposal boxes are pooled from both voxel volumes (LiDAR and lifted image)
by subdividing each box into a fixed sub-grid and trilinearly sampling the
volume at the sub-cell centers. Paired RoI vectors pass through a shared
encoder; a predictor head on each side is pulled toward the detached
encoding of the other side via negative cosine similarity, symmetrized
over both directions. Only the predictor path carries gradient; the
detached branch contributes none by construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .geom import Box3D, iou_3d, trilinear_corners
from .grids import DenseGrid
from .numgrad import (
    LinearMap,
    Value,
    l2_normalize_rows,
    mul,
    neg,
    relu,
    reshape,
    stack_rows,
    stop_grad,
    sum_rows,
    vmean,
    weighted_gather,
)


@dataclass
class RoIFeature:
    """Flattened pooled features of one box: (g^3 * C,) in cell-major order."""

    data: Value
    box: Box3D


@dataclass
class InteractionHeads:
    """Shared two-layer encoder and two-layer predictor, ReLU between layers."""

    encoder: tuple[LinearMap, LinearMap]
    predictor: tuple[LinearMap, LinearMap]

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator) -> "InteractionHeads":
        enc = (LinearMap.init(in_dim, hidden, rng), LinearMap.init(hidden, hidden, rng))
        pred = (LinearMap.init(hidden, hidden, rng), LinearMap.init(hidden, hidden, rng))
        # ReLU activations have positive mean, so an uncentered output map
        # sends every input near the fixed direction sum of its rows and
        # unrelated inputs start out spuriously collinear. Centering the
        # post-ReLU maps kills that shared component at init; training is
        # free to reintroduce it.
        for m in (enc[1], pred[1]):
            m.weight.data -= m.weight.data.mean(axis=0, keepdims=True)
        return cls(enc, pred)

    @classmethod
    def identity(cls, dim: int) -> "InteractionHeads":
        """Identity heads for tests; exact only on nonnegative activations."""
        return cls(
            (LinearMap.identity(dim), LinearMap.identity(dim)),
            (LinearMap.identity(dim), LinearMap.identity(dim)),
        )

    def encode(self, rows: Value) -> Value:
        a, b = self.encoder
        return b(relu(a(rows)))

    def predict(self, rows: Value) -> Value:
        a, b = self.predictor
        return b(relu(a(rows)))

    def params(self) -> list[Value]:
        out: list[Value] = []
        for m in (*self.encoder, *self.predictor):
            out.extend(m.params())
        return out


def voxel_roi_pool(grid: DenseGrid, box: Box3D, g_pool: int) -> RoIFeature:
    """Pool a box from the volume on a g_pool^3 sub-grid.

    Sub-cell centers are laid out in the box's rotated frame and sampled
    trilinearly in continuous voxel coordinates; sub-cells outside the
    lattice contribute zeros. Linear in the grid contents, so gradients
    flow back into the volume.
    """
    g = int(g_pool)
    if g < 1:
        raise ContractError(f"pooling resolution must be >= 1, got {g_pool}")
    steps = (np.arange(g) + 0.5) / g - 0.5
    lx, ly, lz = np.meshgrid(
        steps * box.size[0], steps * box.size[1], steps * box.size[2], indexing="ij"
    )
    local = np.stack([lx.ravel(), ly.ravel(), lz.ravel()], axis=1)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    world = local.copy()
    world[:, 0] = local[:, 0] * c - local[:, 1] * s
    world[:, 1] = local[:, 0] * s + local[:, 1] * c
    world += box.center[None, :]

    spec = grid.spec
    query = (world - spec.origin[None, :]) / spec.voxel_size[None, :] - 0.5
    corner_idx, weights, corner_valid, in_range = trilinear_corners(query, spec.dims)
    dx, dy, dz = spec.dims
    flat_idx = (corner_idx[:, :, 0] * dy + corner_idx[:, :, 1]) * dz + corner_idx[:, :, 2]
    eff = weights * corner_valid * in_range[:, None]
    cells = reshape(grid.feat, (spec.n_cells, grid.channels))
    pooled = weighted_gather(cells, flat_idx, eff)
    return RoIFeature(reshape(pooled, (g * g * g * grid.channels,)), box)


def neg_cosine_rows(pred: Value, target: Value) -> Value:
    """Row-wise negative cosine similarity between unit-normalized rows."""
    if pred.shape != target.shape:
        raise ShapeError(f"row shapes differ: {pred.shape} vs {target.shape}")
    return neg(sum_rows(mul(l2_normalize_rows(pred), l2_normalize_rows(target))))


def interaction_loss(
    lidar_rois: Sequence[RoIFeature],
    image_rois: Sequence[RoIFeature],
    heads: InteractionHeads,
) -> Value:
    """Symmetric stop-gradient alignment loss over paired RoIs.

    For each pair, half the negative cosine between the predictor output of
    one side and the detached encoding of the other, plus the mirrored
    term; averaged over pairs. Ranges over [-1, 1]; identical encodings
    give -1. Zero pairs give a constant 0.
    """
    if len(lidar_rois) != len(image_rois):
        raise ContractError(
            f"pair count mismatch: {len(lidar_rois)} LiDAR vs {len(image_rois)} image RoIs"
        )
    if not lidar_rois:
        return Value(0.0)
    p_rows = stack_rows([r.data for r in lidar_rois])
    i_rows = stack_rows([r.data for r in image_rois])
    e_p = heads.encode(p_rows)
    e_i = heads.encode(i_rows)
    pred_p = heads.predict(e_p)
    pred_i = heads.predict(e_i)
    term_pi = neg_cosine_rows(pred_p, stop_grad(e_i))
    term_ip = neg_cosine_rows(pred_i, stop_grad(e_p))
    per_pair = term_pi * 0.5 + term_ip * 0.5
    return vmean(per_pair)


def pair_cosine(
    lidar_rois: Sequence[RoIFeature],
    image_rois: Sequence[RoIFeature],
    heads: InteractionHeads,
) -> float:
    """Mean raw cosine similarity between paired encodings (no predictor);
    the quantity tracked by the ablation harness."""
    if not lidar_rois:
        return 0.0
    p_rows = stack_rows([r.data for r in lidar_rois])
    i_rows = stack_rows([r.data for r in image_rois])
    e_p = l2_normalize_rows(heads.encode(p_rows))
    e_i = l2_normalize_rows(heads.encode(i_rows))
    return float(np.mean((e_p.data * e_i.data).sum(axis=1)))


def sample_proposals(
    proposals: Sequence,
    gt_boxes: Sequence[Box3D],
    n: int,
    pos_iou: float,
    rng: np.random.Generator,
) -> list:
    """Draw up to n proposals, at most half of them positives.

    A proposal is positive when its best IoU against any ground-truth box
    exceeds pos_iou. Positives are sampled without replacement up to n/2,
    the remainder is filled with negatives; when the pool is short the
    result is simply what exists. Deterministic for a given generator
    state. Accepts any sequence whose elements expose `.box` (or are boxes
    themselves) and returns elements of the same kind.
    """
    if n < 1:
        raise ContractError(f"sample size must be >= 1, got {n}")
    if n % 2:
        raise ContractError(f"sample size must be even, got {n}")
    boxes = [p.box if hasattr(p, "box") else p for p in proposals]
    if gt_boxes:
        best = np.array([max(iou_3d(b, g) for g in gt_boxes) for b in boxes])
    else:
        best = np.zeros(len(boxes))
    pos_idx = np.flatnonzero(best > pos_iou)
    neg_idx = np.flatnonzero(best <= pos_iou)
    n_pos = min(len(pos_idx), n // 2)
    chosen_pos = rng.choice(pos_idx, size=n_pos, replace=False) if n_pos else np.array([], dtype=np.int64)
    n_neg = min(len(neg_idx), n - n_pos)
    chosen_neg = rng.choice(neg_idx, size=n_neg, replace=False) if n_neg else np.array([], dtype=np.int64)
    chosen = np.sort(np.concatenate([chosen_pos, chosen_neg]).astype(np.int64))
    return [proposals[i] for i in chosen]
