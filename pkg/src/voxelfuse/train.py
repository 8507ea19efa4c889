"""Training orchestration on synthetic scenes.

One step: voxelize the cloud, lift the image features through the depth
frustum, fuse the two streams, run the proposal head, and descend the
combined objective. Every random draw comes from a generator seeded by
(base seed, step index), so a run is a pure function of its config.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import (
    CAR_ANCHOR_SIZE,
    Proposal,
    ProposalHead,
    anchor_box,
    encode_box_residuals,
    head_outputs,
    propose,
)
from .errors import ConfigError, NumericError
from .geom import Box3D, iou_3d
from .ivlm import ImageFeatureMap, build_frustum, build_lift_plan, depth_bins_from_points, lift
from .losses import focal_loss, rcnn_loss, rpn_loss, smooth_l1, total_loss
from .numgrad import Value, gather_rows, reshape, sgd_step, zero_grads
from .qfm import QfmParams, concat_restore, fuse, pool_and_flatten, select_nonempty
from .scene import SyntheticScene, gen_scene, make_calibration, voxelize_points
from .vfim import InteractionHeads, interaction_loss, pair_cosine, sample_proposals, voxel_roi_pool

LOSS_CSV_HEADER = "step,L_total,L_rpn,L_rcnn,L_vfim"
_EVAL_TAG = 1 << 20


def thread_cap() -> int:
    """Worker cap from VOXELFUSE_THREADS; >= 2 enables scene prefetch."""
    raw = os.environ.get("VOXELFUSE_THREADS", "2")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"VOXELFUSE_THREADS must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError(f"VOXELFUSE_THREADS must be >= 1, got {cap}")
    return cap


@dataclass
class ModelParams:
    qfm: QfmParams
    interaction: InteractionHeads
    head: ProposalHead

    def all(self) -> list[Value]:
        return self.qfm.params() + self.interaction.params() + self.head.params()


def init_params(cfg, rng: np.random.Generator) -> ModelParams:
    """Draw order is fixed: attention projections, interaction heads,
    proposal head. Reordering would silently change every run."""
    qfm = QfmParams.init(cfg.channels, cfg.attention, rng)
    interaction = InteractionHeads.init(
        cfg.vfim.g_pool ** 3 * cfg.channels, cfg.vfim.hidden, rng
    )
    head = ProposalHead.init(2 * cfg.channels, rng)
    return ModelParams(qfm, interaction, head)


def _cell_for_center(spec, center: np.ndarray) -> int:
    """Flat BEV cell index containing an x/y position, clamped to the grid."""
    ix = int(np.clip((center[0] - spec.origin[0]) // spec.voxel_size[0], 0, spec.dims[0] - 1))
    iy = int(np.clip((center[1] - spec.origin[1]) // spec.voxel_size[1], 0, spec.dims[1] - 1))
    return ix * spec.dims[1] + iy


def match_anchors(
    centers: np.ndarray, gt_boxes: list[Box3D], pos_iou: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label anchors by best IoU against ground truth.

    Returns (labels over all anchors, positive cell indices, (p, 7)
    residual targets). Exact IoU is only evaluated where the anchor's
    axis-aligned bounds overlap a box's.
    """
    n = centers.shape[0]
    labels = np.zeros(n)
    best_iou = np.zeros(n)
    best_gt = np.full(n, -1, dtype=np.int64)
    la, wa, ha = CAR_ANCHOR_SIZE
    for j, g in enumerate(gt_boxes):
        corners = g.bev_corners()
        lo = corners.min(axis=0)
        hi = corners.max(axis=0)
        z0, z1 = g.z_interval()
        cand = np.flatnonzero(
            (centers[:, 0] + la / 2 > lo[0])
            & (centers[:, 0] - la / 2 < hi[0])
            & (centers[:, 1] + wa / 2 > lo[1])
            & (centers[:, 1] - wa / 2 < hi[1])
            & (centers[:, 2] + ha / 2 > z0)
            & (centers[:, 2] - ha / 2 < z1)
        )
        for i in cand:
            v = iou_3d(anchor_box(centers[i]), g)
            if v > best_iou[i]:
                best_iou[i] = v
                best_gt[i] = j
    pos = np.flatnonzero(best_iou >= pos_iou)
    labels[pos] = 1.0
    if pos.size:
        targets = np.stack([encode_box_residuals(gt_boxes[best_gt[i]], centers[i]) for i in pos])
    else:
        targets = np.zeros((0, 7))
    return labels, pos, targets


@dataclass
class StepLosses:
    total: Value
    rpn: Value
    rcnn: Value
    vfim: Value
    sampled: list = field(default_factory=list)

    def named(self) -> list[tuple[str, Value]]:
        return [
            ("L_total", self.total),
            ("L_rpn", self.rpn),
            ("L_rcnn", self.rcnn),
            ("L_vfim", self.vfim),
        ]


def forward_losses(
    cfg, scene: SyntheticScene, params: ModelParams, plan, sample_rng: np.random.Generator
) -> StepLosses:
    lidar = voxelize_points(
        scene.points, scene.intensities, cfg.lidar_grid, cfg.channels, cfg.scene.count_norm
    )
    fmap = ImageFeatureMap(Value(scene.image_features), cfg.stride)
    depth = depth_bins_from_points(
        scene.points, scene.calib, cfg.fmap_dims(), cfg.bins, cfg.stride
    )
    frustum = build_frustum(fmap, depth)
    image_vox = lift(frustum, scene.calib, cfg.image_grid, plan)

    voxels = select_nonempty(lidar)
    bank = pool_and_flatten(image_vox, cfg.attention.pool_scale)
    fused = fuse(voxels.features, bank, params.qfm, cfg.attention)
    merged = concat_restore(fused, voxels)

    out = head_outputs(merged, params.head)
    proposals = propose(
        merged,
        params.head,
        cfg.detector.top_k,
        cfg.detector.nms_iou,
        cfg.detector.pre_nms,
        outputs=out,
    )

    labels, pos_cells, reg_targets = match_anchors(
        out.anchor_centers, scene.boxes, cfg.detector.rpn_pos_iou
    )
    probs_flat = reshape(out.probs, (labels.shape[0],))
    cls_terms = focal_loss(probs_flat, labels, cfg.loss.focal_alpha, cfg.loss.focal_gamma)
    reg_terms = None
    if pos_cells.size:
        diff = gather_rows(out.residuals, pos_cells) - reg_targets
        reg_terms = smooth_l1(diff, cfg.loss.beta_rpn)
    l_rpn = rpn_loss(cls_terms, reg_terms, cfg.loss.weights)

    # Ground truth joins the sampling pool: early proposals are rarely
    # better than background, and both the refinement terms and the
    # interaction term need real positives from the first step.
    pool = proposals + [
        Proposal(b, 1.0, _cell_for_center(out.grid, b.center)) for b in scene.boxes
    ]
    sampled = sample_proposals(
        pool, scene.boxes, cfg.vfim.n_proposals, cfg.vfim.pos_iou, sample_rng
    )
    cells = np.array([p.cell for p in sampled], dtype=np.int64)
    conf = reshape(gather_rows(out.probs, cells), (cells.shape[0],))
    if scene.boxes:
        ious = np.array([max(iou_3d(p.box, g) for g in scene.boxes) for p in sampled])
    else:
        ious = np.zeros(len(sampled))
    refine_terms = None
    pos_mask = ious > cfg.vfim.pos_iou
    if np.any(pos_mask):
        pos_sel = np.flatnonzero(pos_mask)
        rows = gather_rows(out.residuals, cells[pos_sel])
        targets = np.stack(
            [
                encode_box_residuals(
                    max(scene.boxes, key=lambda g: iou_3d(sampled[i].box, g)),
                    out.anchor_centers[cells[i]],
                )
                for i in pos_sel
            ]
        )
        refine_terms = rows - targets
    l_rcnn = rcnn_loss(conf, ious, refine_terms, cfg.loss.beta_refine)

    # Interaction pairs come from positive proposals only. Background
    # regions carry no shared object evidence across the two grids, so
    # pulling their embeddings together just rotates the space and washes
    # out the alignment the positives are teaching.
    object_rois = [p for p, pos in zip(sampled, pos_mask) if pos]
    lidar_rois = [voxel_roi_pool(lidar, p.box, cfg.vfim.g_pool) for p in object_rois]
    image_rois = [voxel_roi_pool(image_vox, p.box, cfg.vfim.g_pool) for p in object_rois]
    l_vfim = interaction_loss(lidar_rois, image_rois, params.interaction)

    l_total = total_loss(l_rpn, l_rcnn, l_vfim, cfg.loss.weights)
    return StepLosses(l_total, l_rpn, l_rcnn, l_vfim, sampled)


@dataclass
class TrainResult:
    rows: list[tuple[int, float, float, float, float]]
    params: ModelParams
    cfg: object

    @property
    def initial_total(self) -> float:
        return self.rows[0][1]

    @property
    def final_total(self) -> float:
        return self.rows[-1][1]


def render_losses_csv(rows) -> str:
    lines = [LOSS_CSV_HEADER]
    for step, lt, lr, lc, lv in rows:
        lines.append(f"{step},{lt!r},{lr!r},{lc!r},{lv!r}")
    return "\n".join(lines) + "\n"


def train_demo(cfg, out_dir: str | Path | None = None) -> TrainResult:
    """Full training run; writes losses.csv when out_dir is given."""
    cfg.validate()
    params = init_params(cfg, np.random.default_rng(cfg.optim.seed))
    calib = make_calibration(cfg.scene)
    plan = build_lift_plan(calib, cfg.image_grid, cfg.fmap_dims(), cfg.bins, cfg.stride)

    steps = cfg.optim.steps
    pool = ThreadPoolExecutor(max_workers=1) if thread_cap() >= 2 and steps > 1 else None
    pending = None
    rows: list[tuple[int, float, float, float, float]] = []
    try:
        scene = gen_scene(cfg, [cfg.optim.seed, 0])
        for step in range(steps):
            if pool is not None and step + 1 < steps:
                pending = pool.submit(gen_scene, cfg, [cfg.optim.seed, step + 1])
            sample_rng = np.random.default_rng([cfg.optim.seed, step, 1])
            try:
                losses = forward_losses(cfg, scene, params, plan, sample_rng)
            except NumericError as exc:
                raise NumericError(f"forward pass diverged at step {step}: {exc}") from exc
            for name, term in losses.named():
                if not math.isfinite(term.item()):
                    raise NumericError(f"{name} diverged at step {step}: {term.item()}")
            zero_grads(params.all())
            losses.total.backward()
            sgd_step(params.all(), cfg.optim.lr)
            rows.append(
                (
                    step,
                    losses.total.item(),
                    losses.rpn.item(),
                    losses.rcnn.item(),
                    losses.vfim.item(),
                )
            )
            # the scene stream advances either way; prefetch only hides the
            # generation latency behind the optimization step
            if step + 1 < steps:
                if pending is not None:
                    scene = pending.result()
                    pending = None
                else:
                    scene = gen_scene(cfg, [cfg.optim.seed, step + 1])
    finally:
        if pool is not None:
            pool.shutdown(wait=False, cancel_futures=True)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "losses.csv").write_text(render_losses_csv(rows))
    return TrainResult(rows, params, cfg)


def eval_alignment(
    cfg, params: ModelParams, eval_seed: int | None = None, n_scenes: int = 3
) -> float:
    """Mean raw encoder cosine over paired object RoIs on held-out scenes.

    Pairs are pooled at the annotated boxes of scenes tagged away from
    the training stream, so the inputs are data-derived and identical
    across runs that share a seed; only the interaction heads move the
    number. Averaging a few scenes damps single-draw noise.
    """
    seed = cfg.optim.seed if eval_seed is None else eval_seed
    calib = make_calibration(cfg.scene)
    plan = build_lift_plan(calib, cfg.image_grid, cfg.fmap_dims(), cfg.bins, cfg.stride)
    vals = []
    for k in range(n_scenes):
        scene = gen_scene(cfg, [seed, _EVAL_TAG + k])
        lidar = voxelize_points(
            scene.points, scene.intensities, cfg.lidar_grid, cfg.channels, cfg.scene.count_norm
        )
        fmap = ImageFeatureMap(Value(scene.image_features), cfg.stride)
        depth = depth_bins_from_points(
            scene.points, scene.calib, cfg.fmap_dims(), cfg.bins, cfg.stride
        )
        image_vox = lift(build_frustum(fmap, depth), scene.calib, cfg.image_grid, plan)
        lidar_rois = [voxel_roi_pool(lidar, b, cfg.vfim.g_pool) for b in scene.boxes]
        image_rois = [voxel_roi_pool(image_vox, b, cfg.vfim.g_pool) for b in scene.boxes]
        vals.append(pair_cosine(lidar_rois, image_rois, params.interaction))
    return float(np.mean(vals))


def sign_test_p(wins: int, n: int) -> float:
    """One-sided binomial tail P(X >= wins) under the fair-coin null."""
    if not 0 <= wins <= n:
        raise ValueError(f"wins {wins} outside [0, {n}]")
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


@dataclass
class AblationResult:
    wins: int
    n: int
    p_value: float
    cosines_on: list[float]
    cosines_off: list[float]

    @property
    def mean_on(self) -> float:
        return float(np.mean(self.cosines_on))

    @property
    def mean_off(self) -> float:
        return float(np.mean(self.cosines_off))


def run_ablation(base_cfg=None, seeds=range(10), gamma: float = 0.1) -> AblationResult:
    """Paired sweep: per seed, train once with the interaction term on and
    once with it off, then compare alignment on the shared eval scenes."""
    from .config import RunConfig  # local import, config depends on this module's peers

    if base_cfg is None:
        base = RunConfig.mini()
        # mini's default step count is smoke-test depth; the paired
        # comparison needs enough optimization for the alignment signal
        # to clear eval noise.
        base.optim.steps = 400
    else:
        base = base_cfg
    on: list[float] = []
    off: list[float] = []
    for seed in seeds:
        cos = {}
        for g in (gamma, 0.0):
            cfg = base.clone()
            cfg.optim.seed = int(seed)
            cfg.loss.weights.gamma_vfim = g
            result = train_demo(cfg)
            cos[g] = eval_alignment(cfg, result.params)
        on.append(cos[gamma])
        off.append(cos[0.0])
    wins = sum(a > b for a, b in zip(on, off))
    return AblationResult(wins, len(on), sign_test_p(wins, len(on)), on, off)
