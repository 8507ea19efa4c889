"""Finite-difference verification battery for the autodiff core.

Each case builds a scalar graph around one op (or a composition ending in
the full lift / fuse / interaction stack) and compares analytic gradients
against central differences. Cases draw inputs away from kinks (relu,
abs, clip edges, pooling ties) so the comparison is numerically
meaningful; a case that cannot be conditioned after several redraws is an
error, not a silent skip.

The interaction tail checks the half of the symmetric loss whose detached
branch is constant (the LiDAR side is held fixed), so finite differences
and the stop-gradient semantics agree; the mirrored half is covered by
the exact zero-gradient case.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numgrad as ng
from .errors import ContractError
from .geom import Calibration, DepthBinSpec, GridSpec
from .grids import DenseGrid
from .ivlm import ImageFeatureMap, build_frustum, build_lift_plan, depth_bins_from_points, lift
from .losses import binary_cross_entropy, focal_loss, smooth_l1
from .numgrad import LinearMap, Value, grad_check
from .qfm import AttentionConfig, QfmParams, concat_restore, fuse, pool_and_flatten, select_nonempty
from .vfim import InteractionHeads, neg_cosine_rows, voxel_roi_pool

TOL = 1e-4
EPS = 1e-5


@dataclass
class SuiteEntry:
    name: str
    max_err: float

    @property
    def ok(self) -> bool:
        return self.max_err < TOL


def _away_from_zero(rng: np.random.Generator, shape, low=0.2, high=1.5) -> np.ndarray:
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng: np.random.Generator, shape, gap=0.01) -> np.ndarray:
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * gap).reshape(shape)


def _clear_relu_kinks(rows: np.ndarray, lin: LinearMap, margin: float = 1e-3) -> None:
    """Shift first-layer biases until no pre-activation sits near zero."""
    for _ in range(16):
        pre = rows @ lin.weight.data + lin.bias.data
        dist = np.abs(pre).min(axis=0)
        bad = np.flatnonzero(dist < margin)
        if not bad.size:
            return
        for j in bad:
            i = int(np.argmin(np.abs(pre[:, j])))
            lin.bias.data[j] += 2 * margin * (1.0 if pre[i, j] >= 0 else -1.0)
    raise ContractError("could not condition relu pre-activations")


# ---------------------------------------------------------------------------
# primitive op cases


def _case_arith(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(3, 4)))
    b = rng.normal(size=(3, 4))
    c = rng.normal(size=(3, 4))
    return grad_check(lambda x: ng.vsum((x + b) * c - (-x) * 0.7 + x / 3.0), a, EPS)


def _case_mul_pair(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    return grad_check(lambda x: ng.vsum(ng.mul(x, ng.mul_const(x, w))), a, EPS)


def _case_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(_away_from_zero(rng, (5, 4)))
    w = rng.normal(size=(5, 4))
    return grad_check(lambda x: ng.vsum(ng.relu(x) * w), a, EPS)


def _case_vabs(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(_away_from_zero(rng, (6,)))
    w = rng.normal(size=(6,))
    return grad_check(lambda x: ng.vsum(ng.vabs(x) * w), a, EPS)


def _case_vlog(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.uniform(0.1, 3.0, size=(4, 3)))
    return grad_check(lambda x: ng.vsum(ng.vlog(x)), a, EPS)


def _case_sigmoid(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(scale=2.0, size=(4, 4)))
    w = rng.normal(size=(4, 4))
    return grad_check(lambda x: ng.vsum(ng.sigmoid(x) * w), a, EPS)


def _case_pow_const(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.uniform(0.3, 2.0, size=(3, 5)))
    return grad_check(lambda x: ng.vsum(ng.pow_const(x, 2.5)), a, EPS)


def _case_clip(seed: int) -> float:
    rng = np.random.default_rng(seed)
    inner = rng.uniform(-0.4, 0.4, size=8)
    outer = rng.uniform(0.65, 1.4, size=8) * rng.choice([-1.0, 1.0], size=8)
    a = Value(np.concatenate([inner, outer]))
    w = rng.normal(size=16)
    return grad_check(lambda x: ng.vsum(ng.clip(x, -0.5, 0.5) * w), a, EPS)


def _case_where_mask(seed: int) -> float:
    rng = np.random.default_rng(seed)
    mask = rng.random((4, 4)) < 0.5
    a = Value(rng.normal(size=(4, 4)))
    b = rng.normal(size=(4, 4))
    return grad_check(
        lambda x: ng.vsum(ng.where_mask(mask, x, ng.mul_const(x, b))), a, EPS
    )


def _case_reductions(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(4, 6)))
    w = rng.normal(size=4)
    return grad_check(
        lambda x: ng.vmean(ng.sum_rows(x) * w) + ng.vsum(x) * 0.3, a, EPS
    )


def _case_reshape_concat_stack(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(2, 6)))
    w = rng.normal(size=(4, 6))

    def f(x: Value) -> Value:
        r = ng.reshape(x, (4, 3))
        cat = ng.concat_cols([r, ng.mul_const(r, 2.0)])
        rows = [ng.gather_rows(cat, [i]) for i in range(4)]
        stacked = ng.stack_rows([ng.reshape(row, (6,)) for row in rows])
        return ng.vsum(stacked * w)

    return grad_check(f, a, EPS)


def _case_matmul_left(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(3, 4)))
    b = rng.normal(size=(4, 2))
    return grad_check(lambda x: ng.vsum(ng.matmul(x, Value(b))), a, EPS)


def _case_matmul_right(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = Value(rng.normal(size=(4, 2)))
    return grad_check(lambda x: ng.vsum(ng.matmul(Value(a), x)), b, EPS)


def _case_transpose(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(3, 5)))
    w = rng.normal(size=(5, 3))
    return grad_check(lambda x: ng.vsum(ng.transpose(x) * w), a, EPS)


def _case_add_bias(seed: int) -> float:
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(5, 3))
    b = Value(rng.normal(size=3))
    w = rng.normal(size=(5, 3))
    return grad_check(lambda x: ng.vsum(ng.add_bias(Value(rows), x) * w), b, EPS)


def _case_outer_u(seed: int) -> float:
    rng = np.random.default_rng(seed)
    u = Value(rng.normal(size=4))
    v = rng.normal(size=3)
    w = rng.normal(size=(3, 4))
    return grad_check(lambda x: ng.vsum(ng.outer(x, Value(v)) * w), u, EPS)


def _case_outer_v(seed: int) -> float:
    rng = np.random.default_rng(seed)
    u = rng.normal(size=4)
    v = Value(rng.normal(size=3))
    w = rng.normal(size=(3, 4))
    return grad_check(lambda x: ng.vsum(ng.outer(Value(u), x) * w), v, EPS)


def _case_pixelwise_outer(seed: int) -> float:
    rng = np.random.default_rng(seed)
    feat = Value(rng.normal(size=(3, 2, 4)))
    depth = rng.random((3, 2, 5))
    w = rng.normal(size=(3, 2, 5, 4))
    return grad_check(lambda x: ng.vsum(ng.pixelwise_outer(x, depth) * w), feat, EPS)


def _case_softmax_rows(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(scale=2.0, size=(4, 5)))
    w = rng.normal(size=(4, 5))
    return grad_check(lambda x: ng.vsum(ng.softmax_rows(x) * w), a, EPS)


def _case_l2_normalize(seed: int) -> float:
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=5)
    a = Value(raw / np.linalg.norm(raw) * rng.uniform(0.8, 2.0))
    w = rng.normal(size=5)
    return grad_check(lambda x: ng.vsum(ng.l2_normalize(x) * w), a, EPS)


def _case_l2_normalize_rows(seed: int) -> float:
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(4, 5))
    raw = raw / np.linalg.norm(raw, axis=1, keepdims=True) * rng.uniform(0.8, 2.0, size=(4, 1))
    a = Value(raw)
    w = rng.normal(size=(4, 5))
    return grad_check(lambda x: ng.vsum(ng.l2_normalize_rows(x) * w), a, EPS)


def _case_stop_grad_zero(seed: int) -> float:
    """Not a finite-difference case: the detached branch must contribute an
    exactly zero gradient. Reported as the max absolute gradient."""
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(3, 3)))
    out = ng.vsum(ng.mul_const(ng.stop_grad(a), rng.normal(size=(3, 3))))
    a.zero_grad()
    out.backward()
    return 0.0 if a.grad is None else float(np.abs(a.grad).max())


def _case_gather_rows(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, size=9)
    w = rng.normal(size=(9, 3))
    return grad_check(lambda x: ng.vsum(ng.gather_rows(x, idx) * w), a, EPS)


def _case_weighted_gather(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(7, 3)))
    idx = rng.integers(0, 7, size=(5, 4))
    wts = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))
    return grad_check(lambda x: ng.vsum(ng.weighted_gather(x, idx, wts) * w), a, EPS)


def _case_scatter_rows(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(4, 3)))
    idx = rng.permutation(9)[:4]
    w = rng.normal(size=(9, 3))
    return grad_check(lambda x: ng.vsum(ng.scatter_rows(x, idx, 9) * w), a, EPS)


def _case_block_max_pool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(_distinct(rng, (4, 5, 3, 2)))  # ragged blocks exercise the pad path
    w = rng.normal(size=(2, 3, 2, 2))
    return grad_check(lambda x: ng.vsum(ng.block_max_pool(x, (2, 2, 2)) * w), a, EPS)


def _case_linear_map(seed: int) -> float:
    rng = np.random.default_rng(seed)
    lin = LinearMap.init(4, 3, rng)
    a = Value(rng.normal(size=(5, 4)))
    w = rng.normal(size=(5, 3))
    return grad_check(lambda x: ng.vsum(lin(x) * w), a, EPS)


def _case_focal(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = Value(rng.uniform(0.05, 0.95, size=12))
    y = (rng.random(12) < 0.5).astype(np.float64)
    return grad_check(lambda x: ng.vsum(focal_loss(x, y)), p, EPS)


def _case_bce(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = Value(rng.uniform(0.05, 0.95, size=10))
    t = rng.uniform(0.0, 1.0, size=10)
    return grad_check(lambda x: ng.vmean(binary_cross_entropy(x, t)), p, EPS)


def _case_smooth_l1(seed: int) -> float:
    rng = np.random.default_rng(seed)
    beta = 0.5
    near = rng.uniform(-0.4, 0.4, size=6) * beta
    far = rng.uniform(1.5, 3.0, size=6) * beta * rng.choice([-1.0, 1.0], size=6)
    d = Value(np.concatenate([near, far]))
    return grad_check(lambda x: ng.vmean(smooth_l1(x, beta)), d, EPS)


def _case_neg_cosine(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a = Value(rng.normal(size=(3, 6)) + 0.5)
    t = Value(rng.normal(size=(3, 6)) + 0.5)
    return grad_check(lambda x: ng.vmean(neg_cosine_rows(x, t)), a, EPS)


# ---------------------------------------------------------------------------
# composed pipeline case: image features -> frustum -> lift -> attention
# fusion -> RoI pooling -> interaction tail


def _composed_setup(seed: int):
    rng = np.random.default_rng(seed)
    channels = 4
    stride = 2
    fdims = (3, 3)
    bins = DepthBinSpec(0.5, 7.0, 4)
    image_grid = GridSpec((1.0, -2.0, -1.0), (1.2, 1.0, 1.0), (4, 4, 2))
    lidar_grid = GridSpec((1.0, -2.0, -1.0), (1.2, 1.0, 1.0), (4, 4, 2))
    f = 3.0
    calib = Calibration(np.array([[3.0, -f, 0.0, 0.0], [3.0, 0.0, -f, 0.0], [1.0, 0.0, 0.0, 0.0]]))

    pts = np.column_stack(
        [
            rng.uniform(1.5, 5.5, size=40),
            rng.uniform(-1.5, 1.5, size=40),
            rng.uniform(-0.8, 0.8, size=40),
        ]
    )
    depth = depth_bins_from_points(pts, calib, fdims, bins, stride)
    plan = build_lift_plan(calib, image_grid, fdims, bins, stride)

    lidar_feat = np.zeros((4, 4, 2, channels))
    occ = rng.random((4, 4, 2)) < 0.4
    occ[0, 0, 0] = True  # at least one query row
    lidar_feat[occ] = rng.normal(size=(int(occ.sum()), channels))
    lidar = DenseGrid(lidar_grid, Value(lidar_feat))

    acfg = AttentionConfig(heads=2, d_k=4, d_v=4, pool_scale=2)
    qparams = QfmParams.init(channels, acfg, rng)
    heads = InteractionHeads.init(2 ** 3 * channels, 16, rng)
    from .geom import Box3D

    box = Box3D(np.array([3.0, 0.0, 0.0]), np.array([2.0, 1.5, 1.2]), 0.3)
    mix = rng.normal(size=(4, 4, 2, 2 * channels))
    feat0 = rng.normal(scale=0.5, size=(*fdims, channels))
    return {
        "feat0": feat0,
        "depth": depth,
        "plan": plan,
        "calib": calib,
        "image_grid": image_grid,
        "lidar": lidar,
        "acfg": acfg,
        "qparams": qparams,
        "heads": heads,
        "box": box,
        "mix": mix,
        "stride": stride,
    }


def _composed_forward(ctx, feat: Value, probe: dict | None = None) -> Value:
    fmap = ImageFeatureMap(feat, ctx["stride"])
    frustum = build_frustum(fmap, ctx["depth"])
    image_vox = lift(frustum, ctx["calib"], ctx["image_grid"], ctx["plan"])
    voxels = select_nonempty(ctx["lidar"])
    bank = pool_and_flatten(image_vox, ctx["acfg"].pool_scale)
    fused = fuse(voxels.features, bank, ctx["qparams"], ctx["acfg"])
    merged = concat_restore(fused, voxels)

    p_roi = voxel_roi_pool(ctx["lidar"], ctx["box"], 2)
    i_roi = voxel_roi_pool(image_vox, ctx["box"], 2)
    heads: InteractionHeads = ctx["heads"]
    p_rows = ng.reshape(p_roi.data, (1, p_roi.data.shape[0]))
    i_rows = ng.reshape(i_roi.data, (1, i_roi.data.shape[0]))
    e_p = heads.encode(p_rows)
    e_i = heads.encode(i_rows)
    pred_i = heads.predict(e_i)
    # The LiDAR branch is constant here, so the detached target is too and
    # central differences remain valid for this half of the symmetric loss.
    tail = ng.vmean(neg_cosine_rows(pred_i, ng.stop_grad(e_p)))
    if probe is not None:
        probe["lifted"] = image_vox.feat.data.copy()
        probe["e_i"] = e_i.data.copy()
        probe["i_rows"] = i_rows.data.copy()
    return ng.vsum(ng.mul_const(merged.feat, ctx["mix"])) + tail * 0.5


def _condition_composed(ctx) -> bool:
    """Reject draws where a pooling block's top two values nearly tie and at
    least one of them actually responds to the image features (structural
    zeros tying with each other are fine: neither side moves under a
    perturbation). Relu pre-activations get their biases nudged instead."""
    probe: dict = {}
    _composed_forward(ctx, Value(ctx["feat0"].copy()), probe)

    plan = ctx["plan"]
    d_flat = ctx["depth"].data.reshape(-1)
    cell_sensitive = (
        ((plan.weights != 0.0) & (d_flat[plan.indices] != 0.0))
        .any(axis=1)
        .reshape(ctx["image_grid"].dims)
    )
    grid_feat = probe["lifted"]
    X, Y, Z, C = grid_feat.shape
    s = ctx["acfg"].pool_scale
    for bx in range(0, X, s):
        for by in range(0, Y, s):
            for bz in range(0, Z, s):
                block = grid_feat[bx : bx + s, by : by + s, bz : bz + s].reshape(-1, C)
                sens = cell_sensitive[bx : bx + s, by : by + s, bz : bz + s].reshape(-1)
                if block.shape[0] < 2:
                    continue
                order = np.argsort(block, axis=0)
                top, runner = order[-1], order[-2]
                gap = block[top, np.arange(C)] - block[runner, np.arange(C)]
                risky = (gap < 1e-3) & (sens[top] | sens[runner])
                if np.any(risky):
                    return False
    heads: InteractionHeads = ctx["heads"]
    _clear_relu_kinks(probe["i_rows"], heads.encoder[0])
    probe2: dict = {}
    _composed_forward(ctx, Value(ctx["feat0"].copy()), probe2)
    _clear_relu_kinks(probe2["e_i"], heads.predictor[0])
    return True


def _case_composed(seed: int) -> float:
    ctx = None
    for attempt in range(24):
        ctx = _composed_setup(seed + 7919 * attempt)
        if _condition_composed(ctx):
            break
    else:
        raise ContractError("could not condition the composed pipeline case")
    feat = Value(ctx["feat0"].copy())
    err = grad_check(lambda x: _composed_forward(ctx, x), feat, EPS)
    wq = ctx["qparams"].wq[0].weight
    err_w = grad_check(lambda _w: _composed_forward(ctx, feat), wq, EPS)
    return max(err, err_w)


CASES: list[tuple[str, Callable[[int], float]]] = [
    ("arith", _case_arith),
    ("mul_pair", _case_mul_pair),
    ("relu", _case_relu),
    ("vabs", _case_vabs),
    ("vlog", _case_vlog),
    ("sigmoid", _case_sigmoid),
    ("pow_const", _case_pow_const),
    ("clip", _case_clip),
    ("where_mask", _case_where_mask),
    ("reductions", _case_reductions),
    ("reshape_concat_stack", _case_reshape_concat_stack),
    ("matmul_left", _case_matmul_left),
    ("matmul_right", _case_matmul_right),
    ("transpose", _case_transpose),
    ("add_bias", _case_add_bias),
    ("outer_u", _case_outer_u),
    ("outer_v", _case_outer_v),
    ("pixelwise_outer", _case_pixelwise_outer),
    ("softmax_rows", _case_softmax_rows),
    ("l2_normalize", _case_l2_normalize),
    ("l2_normalize_rows", _case_l2_normalize_rows),
    ("stop_grad_zero", _case_stop_grad_zero),
    ("gather_rows", _case_gather_rows),
    ("weighted_gather", _case_weighted_gather),
    ("scatter_rows", _case_scatter_rows),
    ("block_max_pool", _case_block_max_pool),
    ("linear_map", _case_linear_map),
    ("focal_loss", _case_focal),
    ("binary_cross_entropy", _case_bce),
    ("smooth_l1", _case_smooth_l1),
    ("neg_cosine", _case_neg_cosine),
    ("composed_lift_fuse_interact", _case_composed),
]


def run_grad_suite(n_seeds: int = 20, base_seed: int = 0) -> list[SuiteEntry]:
    entries = []
    for name, fn in CASES:
        worst = 0.0
        for s in range(n_seeds):
            worst = max(worst, fn(base_seed + s))
        entries.append(SuiteEntry(name, worst))
    return entries
