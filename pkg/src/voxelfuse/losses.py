"""Detection losses and their fixed composition.

Classification terms use a focal reweighting of binary cross-entropy on
probabilities; regression terms use the smooth-L1 penalty. The stage
losses compose with pinned weights: the region-proposal loss is a weighted
sum of classification and regression means, the refinement loss adds an
IoU-calibrated confidence term, and the total objective adds the
interaction loss scaled by gamma.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numgrad import Value, clip, pow_const, vabs, vlog, vmean, where_mask

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    """Composition weights for the total objective."""

    gamma_vfim: float = 0.1
    omega_cls: float = 1.0
    omega_reg: float = 2.0

    def __post_init__(self) -> None:
        for name in ("gamma_vfim", "omega_cls", "omega_reg"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ContractError(f"{name} must be finite, got {v}")
            setattr(self, name, v)


def _as_label_array(y, shape) -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.shape == () and shape != ():
        raise ShapeError(f"labels of shape {arr.shape} do not match predictions {shape}")
    if arr.shape != shape:
        raise ShapeError(f"labels of shape {arr.shape} do not match predictions {shape}")
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ContractError("labels must be exactly 0 or 1")
    return arr


def focal_loss(p: Value, y, alpha: float = 0.25, gamma: float = 2.0) -> Value:
    """Focal binary cross-entropy on probabilities, elementwise.

    loss = -alpha_t * (1 - p_t)^gamma * log(p_t) with p_t = p for positive
    labels and 1 - p otherwise; p is clamped into [1e-7, 1 - 1e-7] before
    the logarithm. gamma = 0 reduces to alpha-weighted cross-entropy.
    """
    y_arr = _as_label_array(y, p.shape)
    pc = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    mask = y_arr == 1.0
    p_t = where_mask(mask, pc, 1.0 - pc)
    alpha_t = np.where(mask, float(alpha), 1.0 - float(alpha))
    return vlog(p_t) * pow_const(1.0 - p_t, float(gamma)) * (-alpha_t)


def smooth_l1(d: Value, beta: float = 1.0) -> Value:
    """Huber-style penalty, elementwise: quadratic inside |d| < beta,
    linear outside, continuous with matching slope at the knee."""
    beta = float(beta)
    if beta <= 0.0:
        raise ContractError(f"beta must be positive, got {beta}")
    a = vabs(d)
    quad = d * d * (0.5 / beta)
    lin = a - 0.5 * beta
    return where_mask(np.abs(d.data) < beta, quad, lin)


def binary_cross_entropy(p: Value, target: np.ndarray) -> Value:
    """Elementwise BCE against soft targets in [0, 1]; p is clamped."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"targets of shape {t.shape} do not match predictions {p.shape}")
    if np.any((t < 0.0) | (t > 1.0)):
        raise ContractError("BCE targets must lie in [0, 1]")
    pc = clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(vlog(pc) * t + vlog(1.0 - pc) * (1.0 - t))


def rpn_loss(cls_terms: Value | None, reg_terms: Value | None, weights: LossWeights) -> Value:
    """Region-proposal objective: omega_cls * mean(classification terms)
    over all anchors plus omega_reg * mean(regression terms) over
    positive-anchor residual entries. Empty regression (no positives)
    contributes zero; so does an anchor-free classification side."""
    total = Value(0.0)
    if cls_terms is not None and cls_terms.data.size:
        total = total + vmean(cls_terms) * weights.omega_cls
    if reg_terms is not None and reg_terms.data.size:
        total = total + vmean(reg_terms) * weights.omega_reg
    return total


def iou_to_confidence_target(iou: np.ndarray) -> np.ndarray:
    """Soft confidence target 2 * IoU - 0.5, clamped into [0, 1]."""
    return np.clip(2.0 * np.asarray(iou, dtype=np.float64) - 0.5, 0.0, 1.0)


def rcnn_loss(
    conf: Value | None,
    iou_targets: np.ndarray | None,
    refine_terms: Value | None,
    beta: float = 1.0,
) -> Value:
    """Refinement objective: BCE between predicted box confidence and the
    IoU-calibrated target, plus smooth-L1 over positive-box residuals."""
    total = Value(0.0)
    if conf is not None and conf.data.size:
        if iou_targets is None:
            raise ContractError("confidence terms need IoU targets")
        total = total + vmean(binary_cross_entropy(conf, iou_to_confidence_target(iou_targets)))
    if refine_terms is not None and refine_terms.data.size:
        total = total + vmean(smooth_l1(refine_terms, beta))
    return total


def total_loss(l_rpn: Value, l_rcnn: Value, l_vfim: Value, weights: LossWeights) -> Value:
    """Fixed composition of the stage losses: rpn + rcnn + gamma * vfim."""
    return l_rpn + l_rcnn + l_vfim * weights.gamma_vfim
