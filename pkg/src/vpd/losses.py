"""Supervision for depth volumes: masked smooth-L1, focal classification, unified focal.

Every loss returns a scalar :class:`~vpd.tensor.Tensor` and only reads the
supervised (valid) pixels, so predictions at masked-out pixels never affect it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor
from .volume import DepthMap, HypothesisPlanes

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossConfig:
    smooth_l1_beta: float = 1.0  # in plane spacings; see beta_meters
    focal_gamma: float = 2.0
    unify_alpha: float = 0.75
    unify_gamma: float = 2.0
    unify_b: float = math.e

    def __post_init__(self):
        if self.smooth_l1_beta <= 0:
            raise ValueError(f"smooth-L1 beta must be positive, got {self.smooth_l1_beta}")
        if self.focal_gamma < 0 or self.unify_gamma < 0:
            raise ValueError("focal exponents must be non-negative")
        if not 0 < self.unify_alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.unify_alpha}")
        if self.unify_b <= 1:
            raise ValueError(f"sigmoid base must exceed 1, got {self.unify_b}")

    def beta_meters(self, planes: HypothesisPlanes) -> float:
        return self.smooth_l1_beta * planes.mean_spacing


def _valid_index(gt: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.nonzero(gt.mask)
    if rows.size == 0:
        raise ValueError("no valid pixels to supervise")
    return rows, cols


def smooth_l1(x: Tensor, beta: float) -> Tensor:
    ax = T.abs_(x)
    return T.where(ax.data < beta, x * x * (0.5 / beta), ax - 0.5 * beta)


def regression_loss(pred: DepthMap, gt: DepthMap, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 depth error over the ground-truth valid pixels (beta in meters)."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    rows, cols = _valid_index(gt)
    p = pred.depths if isinstance(pred.depths, Tensor) else Tensor(np.asarray(pred.depths))
    target = gt.values[rows, cols].astype(p.dtype)
    err = p[rows, cols] - Tensor(target)
    return smooth_l1(err, beta).sum() * (1.0 / rows.size)


def focal_weight(one_minus_p: Tensor, gamma: float) -> Tensor | None:
    # gamma == 0 would differentiate 0 ** -1 at p == 1
    return None if gamma == 0 else T.power(one_minus_p, gamma)


def classification_loss(pred_volume: Tensor, gt: DepthMap, planes: HypothesisPlanes,
                        gamma: float = 2.0) -> Tensor:
    """Summed focal loss on the probability of the plane nearest to the ground truth."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if pred_volume.ndim != 4 or pred_volume.shape[0] != 1 or pred_volume.shape[1] != len(planes):
        raise ShapeError(f"expected [1, {len(planes)}, H, W] volume, got {pred_volume.shape}")
    if pred_volume.shape[2:] != gt.shape:
        raise ShapeError(f"volume {pred_volume.shape} and depth map {gt.shape} differ spatially")
    rows, cols = _valid_index(gt)
    idx = planes.nearest_index(gt.values[rows, cols])
    p = T.clip(pred_volume[0, idx, rows, cols], PROB_FLOOR, 1.0)
    nll = -T.log(p)
    w = focal_weight(1.0 - p, gamma)
    return (nll if w is None else w * nll).sum()


def _bce(u: Tensor, q: np.ndarray) -> Tensor:
    # floors are applied to each log argument separately so q in {0, 1} with a matching u gives exactly 0
    log_u = T.log(T.clip(u, PROB_FLOOR, None))
    log_1mu = T.log(T.clip(1.0 - u, PROB_FLOOR, None))
    return -(log_u * q + log_1mu * (1.0 - q))


def unification_loss(u: Tensor, q: np.ndarray, config: LossConfig = LossConfig(),
                     mask: np.ndarray | None = None) -> Tensor:
    """Unified focal loss summed over all entries of the supervised pixels.

    ``u`` and ``q`` are [1, D, H, W]; ``q``'s per-pixel maximum is the positive target.
    Entries with q > 0 use the positive branch, the rest the negative one.
    """
    q = np.asarray(q, dtype=np.float64)
    if u.shape != q.shape or u.ndim != 4:
        raise ShapeError(f"unity volume {u.shape} and target {q.shape} must both be [1, D, H, W]")
    mask = np.ones(u.shape[2:], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("no valid pixels to supervise")
    qv = q[0][:, rows, cols]
    q_pos = qv.max(axis=0, keepdims=True)
    if np.any(q_pos <= 0):
        raise ValueError("a supervised pixel has no positive target (q+ = 0)")
    uv = u[0][:, rows, cols]
    qv = qv.astype(u.dtype)
    pos = qv > 0
    ln_b = math.log(config.unify_b)
    gap = T.where(pos, T.abs_(uv - Tensor(qv)), uv) * (ln_b / q_pos).astype(u.dtype)
    alpha = np.where(pos, config.unify_alpha, 1.0 - config.unify_alpha).astype(u.dtype)
    w = None if config.unify_gamma == 0 else T.power(T.sigmoid(gap), config.unify_gamma)
    term = _bce(uv, qv) * alpha
    return (term if w is None else term * w).sum()


def semantic_loss(probs: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean negative log-probability of the labelled class over non-ignored voxels."""
    labels = np.asarray(labels)
    if probs.ndim != 4 or probs.shape[1:] != labels.shape:
        raise ShapeError(f"class probabilities {probs.shape} do not match labels {labels.shape}")
    keep = labels != ignore_index
    if not keep.any():
        raise ValueError("every voxel is ignored")
    if labels[keep].max() >= probs.shape[0] or labels[keep].min() < 0:
        raise ValueError("label outside the class range")
    d, h, w = np.nonzero(keep)
    p = T.clip(probs[labels[keep], d, h, w], PROB_FLOOR, 1.0)
    return -T.log(p).sum() * (1.0 / d.size)
