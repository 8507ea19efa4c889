"""Attention-based fusion of LiDAR voxel features with lifted image voxels.

Nonempty LiDAR voxels act as queries; the image voxel volume is max-pooled
into a compact bank of keys/values. Multi-head scaled dot-product attention
produces one fused feature per query, which is concatenated onto the
original LiDAR feature and scattered back into a dense grid with doubled
channels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .geom import GridSpec
from .grids import DenseGrid
from .numgrad import (
    LinearMap,
    Value,
    block_max_pool,
    concat_cols,
    gather_rows,
    matmul,
    reshape,
    scatter_rows,
    softmax_rows,
    transpose,
)


@dataclass
class AttentionConfig:
    heads: int = 4
    d_k: int = 64
    d_v: int = 64
    pool_scale: int = 4

    def __post_init__(self) -> None:
        if self.heads < 1 or self.d_k < 1 or self.d_v < 1:
            raise ContractError(f"heads/d_k/d_v must be positive, got {self}")
        if self.pool_scale < 1:
            raise ContractError(f"pool scale must be >= 1, got {self.pool_scale}")


@dataclass
class SparseVoxelSet:
    """Features of the occupied voxels of a grid, in lexicographic index order."""

    indices: np.ndarray  # (M, 3) int
    features: Value      # (M, C)
    grid: GridSpec

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.indices.shape[1] != 3:
            raise ShapeError(f"indices must be (M, 3), got shape {self.indices.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.indices.shape[0]:
            raise ShapeError(
                f"{self.indices.shape[0]} indices but features of shape {self.features.shape}"
            )
        flat = self.flat_indices()
        if flat.size and np.unique(flat).size != flat.size:
            raise ContractError("voxel set contains duplicate indices")

    def flat_indices(self) -> np.ndarray:
        dx, dy, dz = self.grid.dims
        return (self.indices[:, 0] * dy + self.indices[:, 1]) * dz + self.indices[:, 2]

    @property
    def count(self) -> int:
        return self.indices.shape[0]


@dataclass
class QfmParams:
    """Projection maps: per-head query/key/value plus the output map."""

    wq: list[LinearMap]
    wk: list[LinearMap]
    wv: list[LinearMap]
    wo: LinearMap

    @classmethod
    def init(cls, channels: int, cfg: AttentionConfig, rng: np.random.Generator) -> "QfmParams":
        wq = [LinearMap.init(channels, cfg.d_k, rng, bias=False) for _ in range(cfg.heads)]
        wk = [LinearMap.init(channels, cfg.d_k, rng, bias=False) for _ in range(cfg.heads)]
        wv = [LinearMap.init(channels, cfg.d_v, rng, bias=False) for _ in range(cfg.heads)]
        wo = LinearMap.init(cfg.heads * cfg.d_v, channels, rng, bias=True)
        return cls(wq, wk, wv, wo)

    def params(self) -> list[Value]:
        out: list[Value] = []
        for group in (self.wq, self.wk, self.wv):
            for m in group:
                out.extend(m.params())
        out.extend(self.wo.params())
        return out


def select_nonempty(grid: DenseGrid) -> SparseVoxelSet:
    """Rows for exactly the voxels with any nonzero channel, lexicographic."""
    occupied = np.any(grid.feat.data != 0.0, axis=3)
    idx = np.argwhere(occupied)  # argwhere scans in C order: already lexicographic
    flat_feat = reshape(grid.feat, (grid.spec.n_cells, grid.channels))
    dx, dy, dz = grid.spec.dims
    flat_idx = (idx[:, 0] * dy + idx[:, 1]) * dz + idx[:, 2]
    rows = gather_rows(flat_feat, flat_idx)
    return SparseVoxelSet(idx, rows, grid.spec)


def pool_and_flatten(grid: DenseGrid, pool_scale: int) -> Value:
    """Block max-pool the volume and flatten it to an (L, C) key/value bank.

    Rows follow the lexicographic order of the pooled lattice. Edge blocks
    pool over only the cells that exist.
    """
    pooled = block_max_pool(grid.feat, (pool_scale, pool_scale, pool_scale))
    gx, gy, gz, c = pooled.shape
    return reshape(pooled, (gx * gy * gz, c))


def fuse(
    queries: Value,
    bank: Value,
    params: QfmParams,
    cfg: AttentionConfig,
    diagnostics: dict | None = None,
) -> Value:
    """Multi-head scaled dot-product attention from voxel queries into the
    pooled image bank; returns one fused row per query.

    With no queries (M = 0) the result is empty; an empty bank is a
    contract violation. Pass a dict as `diagnostics` to capture per-head
    logits and attention matrices.
    """
    if queries.ndim != 2 or bank.ndim != 2:
        raise ShapeError(f"expected 2-D queries/bank, got {queries.shape} and {bank.shape}")
    if queries.shape[1] != bank.shape[1]:
        raise ShapeError(
            f"channel widths differ: queries {queries.shape} vs bank {bank.shape}"
        )
    if bank.shape[0] == 0:
        raise ContractError("attention bank is empty (no pooled image voxels)")
    if len(params.wq) != cfg.heads:
        raise ContractError(f"{len(params.wq)} projection heads for config with {cfg.heads}")
    scale = 1.0 / np.sqrt(cfg.d_k)
    heads: list[Value] = []
    for i in range(cfg.heads):
        q = params.wq[i](queries)
        k = params.wk[i](bank)
        v = params.wv[i](bank)
        logits = matmul(q, transpose(k)) * scale
        attn = softmax_rows(logits)
        heads.append(matmul(attn, v))
        if diagnostics is not None:
            diagnostics.setdefault("logits", []).append(logits.data.copy())
            diagnostics.setdefault("attention", []).append(attn.data.copy())
    return params.wo(concat_cols(heads))


def concat_restore(fused: Value, voxels: SparseVoxelSet) -> DenseGrid:
    """Concatenate fused rows onto the original voxel features and scatter
    into a dense grid with doubled channels; untouched cells stay zero."""
    if fused.shape != voxels.features.shape:
        raise ShapeError(
            f"fused rows {fused.shape} do not match voxel features {voxels.features.shape}"
        )
    rows = concat_cols([voxels.features, fused])
    dense = scatter_rows(rows, voxels.flat_indices(), voxels.grid.n_cells)
    feat = reshape(dense, (*voxels.grid.dims, 2 * voxels.features.shape[1]))
    return DenseGrid(voxels.grid, feat)


def save_params_bundle(params: QfmParams, out_dir) -> None:
    """One tensor file per projection: wq_<i>, wk_<i>, wv_<i>, wo, wo_bias."""
    from pathlib import Path

    from .vxf import write_vxf

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, group in (("wq", params.wq), ("wk", params.wk), ("wv", params.wv)):
        for i, m in enumerate(group):
            write_vxf(out / f"{name}_{i}.vxf", m.weight.data)
    write_vxf(out / "wo.vxf", params.wo.weight.data)
    write_vxf(out / "wo_bias.vxf", params.wo.bias.data)


def load_params_bundle(in_dir, channels: int, cfg: AttentionConfig) -> QfmParams:
    from pathlib import Path

    from .vxf import read_vxf

    src = Path(in_dir)

    def load_map(name: str, shape, bias_name: str | None = None) -> LinearMap:
        path = src / f"{name}.vxf"
        if not path.exists():
            raise ContractError(f"parameter bundle is missing {path.name}")
        w = read_vxf(path)
        if w.shape != shape:
            raise ShapeError(f"{path.name}: expected shape {shape}, got {w.shape}")
        b = None
        if bias_name is not None:
            b = Value(read_vxf(src / f"{bias_name}.vxf"))
        return LinearMap(Value(w), b)

    wq = [load_map(f"wq_{i}", (channels, cfg.d_k)) for i in range(cfg.heads)]
    wk = [load_map(f"wk_{i}", (channels, cfg.d_k)) for i in range(cfg.heads)]
    wv = [load_map(f"wv_{i}", (channels, cfg.d_v)) for i in range(cfg.heads)]
    wo = load_map("wo", (cfg.heads * cfg.d_v, channels), bias_name="wo_bias")
    return QfmParams(wq, wk, wv, wo)
